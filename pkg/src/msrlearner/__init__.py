"""Multi-study R-learner."""

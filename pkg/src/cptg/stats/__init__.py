"""Statistical routines: rank-sum test, ZINB regression, design matrices, descriptive tables."""

DEBUG = False

DEFAULT_ALPHA = 0.05
DEFAULT_DISCOUNT = 0.99
DEFAULT_TOL = 1e-6
DEFAULT_M_TS = 10000
DEFAULT_M_FLGI = 100
DEFAULT_M_RANDOMIZATION = 500
DEFAULT_NR = 5000

# logit-scale bound used by the separation check of the unpenalized fit
SEPARATION_NORM = 10.0
SEPARATION_MAX_ITER = 50
# a large fit only counts as separated while it is still moving: score norm above
# SEPARATION_GTOL, a Newton step above SEPARATION_STEP, or fitted variances below SEPARATION_BOUNDARY
SEPARATION_GTOL = 1e-4
SEPARATION_STEP = 1e-3
SEPARATION_BOUNDARY = 1e-12

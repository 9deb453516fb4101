import os

# one visible core in CI: BLAS thread pools only add contention, and a
# fixed count keeps runs bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

"""Time the MCMC hot loop with the compiled and the numpy kernels.

    python3 benchmarks/bench_backend.py [--steps N] [--repeat R]

Both backends run the same chain on a surrogate posterior (fitted GP with
``s`` training points); the script checks the chains agree and prints the
median wall time per backend.
"""
import argparse
import statistics
import time

import numpy as np

from tolgp import _backend
from tolgp.bayes import MeasurementModel, PriorBox
from tolgp.gp import KernelParams, TrainingDesign, gp_fit
from tolgp.sampler import SurrogateLogPosterior, mcmc_sample


def surrogate_target(s: int, d: int, m: int, seed: int = 0) -> SurrogateLogPosterior:
    rng = np.random.default_rng(seed)
    design = TrainingDesign(rng.random((s, d)), rng.uniform(0.01, 0.1, s), rng.normal(size=(s, m)) * 0.1,
                            np.zeros(s))
    model = gp_fit(design, KernelParams(0.12, (0.1,) * m))
    meas = MeasurementModel(rng.normal(size=m) * 0.05, np.full(m, 1e-3))
    return SurrogateLogPosterior(model, meas, PriorBox(np.zeros(d), np.ones(d)), "marginal")


def time_backend(backend, target, steps, repeat):
    box = target.prior
    times, draw = [], None
    with _backend.using(backend):
        for _ in range(repeat):
            t0 = time.perf_counter()
            draw = mcmc_sample(target, steps, box.midpoint, box, 7)
            times.append(time.perf_counter() - t0)
    return statistics.median(times), draw


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if "cython" not in _backend.available():
        print("compiled kernels not built; only the python backend is available")
    print(f"{'s':>4} {'d':>2} {'m':>2} {'backend':>8} {'seconds':>9} {'speedup':>8}")
    for s, d, m in ((10, 1, 2), (40, 2, 3), (120, 2, 3)):
        target = surrogate_target(s, d, m)
        t_py, ref = time_backend("python", target, args.steps, args.repeat)
        print(f"{s:4d} {d:2d} {m:2d} {'python':>8} {t_py:9.3f} {1.0:8.1f}")
        if "cython" in _backend.available():
            t_c, draw = time_backend("cython", target, args.steps, args.repeat)
            if not np.allclose(draw.samples, ref.samples, rtol=0, atol=1e-12):
                raise SystemExit("backends disagree")
            print(f"{s:4d} {d:2d} {m:2d} {'cython':>8} {t_c:9.3f} {t_py / t_c:8.1f}")


if __name__ == "__main__":
    main()

"""SE summaries, histograms and timing comparisons."""

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dataset import pack_channel
from .lbfgs import LbfgsConfig, optimize
from .models import reparameterize
from .rng import make_rng
from .se import mrt_precoder, spectral_efficiency, zf_precoder

# low / average / high efficiency bands of the multi-start SE distribution
SE_BANDS = (7.0, 14.0)


def se_histogram(values, bands=SE_BANDS):
    """Counts in the bands ``(-inf, 7)``, ``[7, 14)``, ``[14, inf)``."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = bands
    return {
        f"<{lo:g}": int(np.sum(v < lo)),
        f"{lo:g}-{hi:g}": int(np.sum((v >= lo) & (v < hi))),
        f">={hi:g}": int(np.sum(v >= hi)),
    }


def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return {
        "count": int(v.size),
        "mean_se": float(v.mean()) if v.size else None,
        "std_se": float(v.std()) if v.size else None,
        "histogram": se_histogram(v),
    }


@dataclass
class SeReport:
    methods: dict = field(default_factory=dict)  # name -> summary
    timings: dict = field(default_factory=dict)

    def add(self, name, values):
        self.methods[name] = summarize(values)

    def to_dict(self):
        return asdict(self)

    def rows(self):
        """Flat rows for CSV export."""
        out = []
        for name, s in self.methods.items():
            row = {"method": name, "count": s["count"], "mean_se": s["mean_se"], "std_se": s["std_se"]}
            row.update({f"hist {k}": v for k, v in s["histogram"].items()})
            out.append(row)
        return out


def evaluate_precoders(H, Ws, cfg):
    return [spectral_efficiency(H, W, cfg) for W in Ws]


def baseline_se(H, cfg):
    out = {"mrt": spectral_efficiency(H, mrt_precoder(H, cfg), cfg)}
    try:
        out["zf"] = spectral_efficiency(H, zf_precoder(H, cfg), cfg)
    except ValueError:
        out["zf"] = None
    return out


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times


def inference_fn(model, H, seed=0):
    """Closure producing one sampled (packed) precoder per call."""
    rng = make_rng(seed, "bench")
    dec_s, dec_p = model.nets["decoder"]
    if model.conditional:
        h = pack_channel(H)[None, :]
        pri_s, pri_p = model.nets["prior"]

        def run():
            ph = nn.forward(pri_s, pri_p, h)
            z = reparameterize(ph, rng.standard_normal(ph.mean.shape))
            return nn.forward(dec_s, dec_p, np.concatenate([z, h], axis=1)).mean
    else:
        def run():
            z = rng.standard_normal((1, model.d_model))
            return nn.forward(dec_s, dec_p, z).mean
    return run


def benchmark(model, H, cfg, opt=LbfgsConfig(), repeats=5, seed=0, inference_repeats=None):
    """Median wall time of one L-BFGS solve versus one network inference."""
    iters = []

    def solve():
        iters.append(optimize(H, cfg, opt, seed + len(iters)).iterations)

    t_solve, solve_times = _median_time(solve, repeats)
    run = inference_fn(model, H, seed)
    run()  # warm-up
    t_inf, _ = _median_time(run, inference_repeats or max(repeats, 50))
    return {
        "lbfgs_median_seconds": t_solve,
        "lbfgs_iterations": iters,
        "lbfgs_median_iterations": float(statistics.median(iters)),
        "lbfgs_seconds_per_iteration": t_solve / max(1.0, statistics.median(iters)),
        "inference_median_seconds": t_inf,
        "ratio": t_solve / t_inf,
        "repeats": repeats,
        "low_confidence": repeats < 2,
    }

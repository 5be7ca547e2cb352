"""
Time-to-first-token and decoding-speed measurement across compression configs.

TTFT is wall-clock (``time.perf_counter``) from the ``generate`` call to the
first emitted token, so it covers encoding, projection and prefill, but never
checkpoint loading or image decoding: sessions are fully loaded before any
clock starts. Decoding speed is ``(n - 1) / (t_n - t_1)`` over the token
timestamps and excludes prefill.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import lm, vision
from .config import ModelConfig
from .errors import EdgeVLMError
from .model import Weights, init_weights

log = logging.getLogger(__name__)


@dataclass
class Session:
    config_id: str
    cfg: ModelConfig
    weights: Weights


def host_descriptor() -> str:
    return (f"{platform.system()} {platform.release()} {platform.machine()}; "
            f"{os.cpu_count()} cpu; python {platform.python_version()}; numpy {np.__version__}")


def measure_ttft(session: Session, image: vision.Image, prompt: str) -> float:
    """Seconds from generate() to the first token (greedy, one token)."""
    res = lm.generate(session.weights, session.cfg, image, prompt, lm.GenerationParams(max_new=1))
    return res.ttft


def measure_decode_speed(session: Session, image: vision.Image, prompt: str, n_tokens: int = 128) -> float:
    """Tokens per second after the first token; EOS is ignored so exactly ``n_tokens`` are produced."""
    if n_tokens < 2:
        raise ValueError("decode speed needs at least 2 tokens")
    res = lm.generate(session.weights, session.cfg, image, prompt,
                      lm.GenerationParams(max_new=n_tokens, ignore_eos=True))
    tps = res.decode_tps
    if tps is None:
        raise EdgeVLMError("generation produced fewer than 2 timestamped tokens")
    return tps


def summarize(samples: Sequence[float]) -> dict:
    if not samples:
        return {"median": None, "p10": None, "p90": None}
    arr = np.asarray(samples, dtype=np.float64)
    return {"median": float(np.median(arr)), "p10": float(np.percentile(arr, 10)),
            "p90": float(np.percentile(arr, 90))}


@dataclass
class BenchmarkReport:
    config_id: str
    strategy: str
    ratio: int
    image_tokens: int
    model_dims: dict
    runs: int
    warmup: int
    ttft_samples_ms: list[float] = field(default_factory=list)
    decode_samples_tps: list[float] = field(default_factory=list)
    invalid_runs: int = 0
    host: str = ""
    error: str | None = None

    @property
    def ttft_ms(self) -> dict:
        return summarize(self.ttft_samples_ms)

    @property
    def decode_tps(self) -> dict:
        return summarize(self.decode_samples_tps)

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id, "strategy": self.strategy, "ratio": self.ratio,
            "image_tokens": self.image_tokens, "model_dims": self.model_dims,
            "runs": self.runs, "warmup": self.warmup, "invalid_runs": self.invalid_runs,
            "ttft_ms": self.ttft_ms, "decode_tps": self.decode_tps,
            "samples": {"ttft_ms": self.ttft_samples_ms, "decode_tps": self.decode_samples_tps},
            "host": self.host, "error": self.error,
        }


def reports_json(reports: Sequence[BenchmarkReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def reports_csv(reports: Sequence[BenchmarkReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "metric", "median", "p10", "p90", "runs"])
    for r in reports:
        for metric, stats in (("ttft_ms", r.ttft_ms), ("decode_tps", r.decode_tps)):
            w.writerow([r.config_id, metric, stats["median"], stats["p10"], stats["p90"], r.runs])
    return buf.getvalue()


def reports_table(reports: Sequence[BenchmarkReport]) -> str:
    """Metric rows x config columns, medians only."""
    cols = [r.config_id for r in reports]
    rows = [("TTFT (ms)", [r.ttft_ms["median"] for r in reports]),
            ("Decoding Speed (tokens/s)", [r.decode_tps["median"] for r in reports])]
    width = max(len(c) for c in cols + ["Metric"]) + 2
    lines = ["Metric".ljust(28) + "".join(c.rjust(width) for c in cols)]
    for label, vals in rows:
        lines.append(label.ljust(28) + "".join(("-" if v is None else f"{v:.2f}").rjust(width) for v in vals))
    return "\n".join(lines)


def ratio_sessions(weights: Weights, cfg: ModelConfig, ratios: Sequence[int], seed: int = 0
                   ) -> list[Callable[[], Session]]:
    """Loaders for one session per ratio sharing the encoder and LM weights.

    The checkpoint's own projector is used for its ratio; other ratios get a
    freshly initialized projector (weights do not affect timing).
    """
    def loader(r: int) -> Callable[[], Session]:
        def load() -> Session:
            c = cfg.with_strategy(cfg.strategy.kind, r)
            if r == cfg.strategy.ratio:
                w = weights
            else:
                fresh = init_weights(c, seed)
                w = {n: t for n, t in weights.items() if not n.startswith("projector.")}
                w.update({n: t for n, t in fresh.items() if n.startswith("projector.")})
            return Session(f"{c.strategy.kind.value}-r{r}", c, w)
        return load
    return [loader(r) for r in ratios]


def run_matrix(loaders: Sequence[Callable[[], Session]], image: vision.Image, prompt: str = "describe the image.",
               runs: int = 5, warmup: int = 2, n_tokens: int = 128, measure_decode: bool = True,
               out: str | os.PathLike | None = None) -> list[BenchmarkReport]:
    """Benchmark every config. A failing config is reported with its error; the rest proceed.

    All sessions are loaded before any clock starts, then measured round-robin
    (one run of each config per round) so slow drift of the host affects every
    config alike instead of biasing whichever ran last.
    """
    if runs < 3:
        raise ValueError("at least 3 measured runs are required")
    if warmup < 0:
        raise ValueError("warmup must be nonnegative")
    host = host_descriptor()
    reports: list[BenchmarkReport] = []
    live: list[tuple[Session, BenchmarkReport]] = []
    for load in loaders:
        try:
            session = load()
        except Exception as exc:  # isolate the failure to this config
            log.error("config failed to load: %s", exc)
            reports.append(BenchmarkReport("unloadable", "", 0, 0, {}, runs, warmup, host=host, error=str(exc)))
            continue
        cfg = session.cfg
        rep = BenchmarkReport(session.config_id, cfg.strategy.kind.value, cfg.strategy.ratio, cfg.image_tokens,
                              {"d_vision": cfg.vision.d_vision, "d_lm": cfg.lm.d_lm,
                               "lm_layers": cfg.lm.n_layers, "grid": cfg.vision.grid},
                              runs, warmup, host=host)
        reports.append(rep)
        live.append((session, rep))
    for i in range(warmup + runs):
        keep = i >= warmup
        for session, rep in live:
            if rep.error is not None:
                continue
            try:
                ttft = measure_ttft(session, image, prompt)
                tps = measure_decode_speed(session, image, prompt, n_tokens) if measure_decode else None
            except EdgeVLMError as exc:
                if keep:
                    rep.invalid_runs += 1
                log.warning("%s run %d invalid: %s", session.config_id, i, exc)
                continue
            except Exception as exc:
                rep.error = str(exc)
                log.error("%s failed: %s", session.config_id, exc)
                continue
            if keep:
                rep.ttft_samples_ms.append(ttft * 1000.0)
                if tps is not None:
                    rep.decode_samples_tps.append(tps)
    if out is not None:
        write_reports(out, reports)
    return reports


def write_reports(path: str | os.PathLike, reports: Sequence[BenchmarkReport]) -> None:
    path = Path(path)
    path.write_text(reports_json(reports) + "\n")
    path.with_suffix(".csv").write_text(reports_csv(reports))

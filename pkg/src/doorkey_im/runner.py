"""Experiment orchestration: strategy x seed runs, CSV logs, aggregation and SVG plots."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .agent import EpisodeLog, TrainingConfig, train
from .gridworld import OBS_DIM, new_doorkey
from .llm_reward import (
    DEFAULT_MISSION,
    PROMPT_VERSION,
    HeuristicMockClient,
    HttpChatClient,
    LlmRewardConfig,
    LlmScorer,
    load_cache,
)
from .vsimr import VaeModel

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGIES = ("baseline", "vae", "llm", "llm_vae")
CSV_HEADER = ["episode", "extrinsic_return", "vae_reward_sum", "llm_reward_sum", "steps", "success"]
AGGREGATE_HEADER = ["episode", "mean", "std"]


class UsageError(ValueError):
    """Bad user input: config contents, file mismatches, flag values."""


@dataclass
class RunConfig:
    strategy: str
    env_size: int = 8
    episodes: int = 1000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    training: TrainingConfig = field(default_factory=TrainingConfig)
    llm: LlmRewardConfig = field(default_factory=LlmRewardConfig)
    mock_llm: bool = True
    output_dir: Path = Path("runs")
    cache_dir: Path = Path("cache")
    workers: int = 1
    mission: str = DEFAULT_MISSION

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.env_size < 5:
            raise UsageError("env_size must be at least 5")
        if self.episodes < 1 or not self.seeds or self.workers < 1:
            raise UsageError("episodes, seeds and workers must be non-empty / positive")
        if len(set(self.seeds)) != len(self.seeds):
            raise UsageError("seeds must be distinct")
        self.output_dir = Path(self.output_dir)
        self.cache_dir = Path(self.cache_dir)

    @property
    def uses_vae(self) -> bool:
        return self.strategy in ("vae", "llm_vae")

    @property
    def uses_llm(self) -> bool:
        return self.strategy in ("llm", "llm_vae")

    def training_for(self, seed: int) -> TrainingConfig:
        """Per-seed training config with the strategy's beta overrides applied."""
        overrides = {"seed": seed, "episodes": self.episodes}
        if not self.uses_vae:
            overrides["beta_vae"] = 0.0
        if not self.uses_llm:
            overrides["beta_llm"] = 0.0
        return dataclasses.replace(self.training, **overrides)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "strategy": self.strategy,
            "env_size": self.env_size,
            "episodes": self.episodes,
            "seeds": list(self.seeds),
            "training": dataclasses.asdict(self.training),
            "llm": dataclasses.asdict(self.llm),
            "mock_llm": self.mock_llm,
            "output_dir": str(self.output_dir),
            "cache_dir": str(self.cache_dir),
            "workers": self.workers,
            "mission": self.mission,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        data = dict(data)
        version = data.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise UsageError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        try:
            data["training"] = TrainingConfig(**data.get("training", {}))
            data["llm"] = LlmRewardConfig(**data.get("llm", {}))
            return cls(**data)
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from exc
        except UsageError:
            raise
        except ValueError as exc:
            raise UsageError(f"bad config: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)


def layout_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def run_stem(strategy: str, seed: int) -> str:
    return f"{strategy}_seed{seed}"


def _format_row(rec: EpisodeLog) -> list[str]:
    return [str(rec.episode), repr(float(rec.extrinsic_return)), repr(float(rec.vae_reward_sum)),
            repr(float(rec.llm_reward_sum)), str(rec.steps), str(int(rec.success))]


def _write_manifest(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def run_seed(cfg: RunConfig, seed: int) -> Path:
    """Train one seed, streaming rows to ``<output_dir>/<strategy>_seed<seed>.csv``."""
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    stem = run_stem(cfg.strategy, seed)
    csv_path = cfg.output_dir / f"{stem}.csv"
    manifest_path = cfg.output_dir / f"{stem}.manifest.json"
    training = cfg.training_for(seed)

    scorer = None
    cache_path = None
    if cfg.uses_llm:
        cache_path = cfg.cache_dir / f"{stem}.jsonl"
        if cfg.mock_llm:
            client = HeuristicMockClient()
        else:
            client = HttpChatClient(cfg.llm)
            client.check_reachable()
        scorer = LlmScorer(load_cache(cache_path), client, cfg.llm, cfg.mission)

    vae = None
    if cfg.uses_vae:
        # a fourth stream, independent of the three the training loop draws
        vae_init = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
        vae = VaeModel.create(OBS_DIM, vae_init, latent_dim=training.latent_dim, hidden=training.hidden,
                              lr=training.vae_lr)

    manifest = {
        "config": cfg.to_dict(),
        "seed": seed,
        "training": dataclasses.asdict(training),
        "prompt_version": PROMPT_VERSION,
        "llm_backend": ("mock" if cfg.mock_llm else "http") if cfg.uses_llm else None,
        "cache_path": str(cache_path) if cache_path else None,
        "csv": csv_path.name,
        "status": "running",
        "episodes_completed": 0,
    }
    _write_manifest(manifest_path, manifest)

    def env_factory(ep: int):
        return new_doorkey(cfg.env_size, layout_seed(seed, ep))

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        fh.flush()

        def on_episode(rec: EpisodeLog) -> None:
            writer.writerow(_format_row(rec))
            fh.flush()
            manifest["episodes_completed"] = rec.episode + 1

        try:
            train(env_factory, training, vae=vae, llm_scorer=scorer, on_episode=on_episode)
        except BaseException as exc:
            manifest["status"] = "incomplete"
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            raise
        else:
            manifest["status"] = "complete"
        finally:
            if scorer is not None:
                manifest["cache_misses"] = scorer.calls
                manifest["cache_entries"] = len(scorer.cache)
            _write_manifest(manifest_path, manifest)
    return csv_path


def run(cfg: RunConfig) -> list[Path]:
    """Run every seed; independent seeds may go to a process pool."""
    if cfg.uses_llm and not cfg.mock_llm:
        client = HttpChatClient(cfg.llm)
        try:
            client.check_reachable()
        finally:
            client.close()
    if cfg.workers == 1 or len(cfg.seeds) == 1:
        return [run_seed(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.seeds))) as pool:
        return list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))


# --- aggregation ---

@dataclass
class AggregateCurve:
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.mean)


def read_returns(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise UsageError(f"{path}: unexpected header {header}")
            return np.array([float(row[1]) for row in reader if row])
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` points; early points average what exists."""
    if window < 1:
        raise UsageError("window must be >= 1")
    values = np.asarray(values, dtype=float)
    if window == 1:
        return values.copy()
    # explicit windows rather than a running cumsum, which drifts over long curves
    head = [values[:i + 1].mean() for i in range(min(window - 1, len(values)))]
    if len(values) < window:
        return np.array(head)
    full = np.lib.stride_tricks.sliding_window_view(values, window).mean(axis=1)
    return np.concatenate([head, full])


def aggregate_curves(curves: list[np.ndarray], window: int) -> AggregateCurve:
    smoothed = np.stack([moving_average(c, window) for c in curves])
    return AggregateCurve(smoothed.mean(axis=0), smoothed.std(axis=0))


def aggregate(paths: list[str | Path], window: int) -> AggregateCurve:
    if not paths:
        raise UsageError("no input files")
    curves = [read_returns(p) for p in paths]
    expected = len(curves[0])
    for path, curve in zip(paths, curves):
        if len(curve) != expected:
            raise UsageError(f"{path}: {len(curve)} episodes, expected {expected} (from {paths[0]})")
    return aggregate_curves(curves, window)


def write_aggregate(curve: AggregateCurve, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_HEADER)
        for i, (m, s) in enumerate(zip(curve.mean, curve.std)):
            writer.writerow([i, repr(float(m)), repr(float(s))])
    return path


def read_aggregate(path: str | Path) -> AggregateCurve:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != AGGREGATE_HEADER:
                raise UsageError(f"{path}: not an aggregate CSV (header must be {','.join(AGGREGATE_HEADER)})")
            rows = [(float(r[1]), float(r[2])) for r in reader if r]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise UsageError(f"{path}: no rows")
    arr = np.array(rows)
    return AggregateCurve(arr[:, 0], arr[:, 1])


# --- SVG ---

SVG_WIDTH, SVG_HEIGHT = 800, 500
_MARGIN = {"left": 70, "right": 20, "top": 20, "bottom": 60}
_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _round_sig(value: float, up: bool) -> float:
    """Round outward to one significant digit."""
    if value == 0 or not math.isfinite(value):
        return 0.0
    scale = 10.0 ** math.floor(math.log10(abs(value)))
    q = value / scale
    q = math.ceil(q - 1e-9) if up else math.floor(q + 1e-9)
    return q * scale


def axis_range(lo: float, hi: float) -> tuple[float, float]:
    a, b = _round_sig(lo, up=False), _round_sig(hi, up=True)
    if b <= a:
        span = 10.0 ** math.floor(math.log10(abs(a))) if a else 1.0
        b = a + span
    return a, b


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.6g}"


def render_svg(curves: dict[str, AggregateCurve]) -> str:
    """Line chart of mean curves with mean +/- std bands; output depends only on the inputs."""
    if not curves:
        raise UsageError("nothing to plot")
    n_max = max(len(c) for c in curves.values())
    lo = min(float(np.min(c.mean - c.std)) for c in curves.values())
    hi = max(float(np.max(c.mean + c.std)) for c in curves.values())
    y0, y1 = axis_range(lo, hi)
    x0, x1 = 0.0, float(max(n_max - 1, 1))

    left, top = _MARGIN["left"], _MARGIN["top"]
    pw = SVG_WIDTH - _MARGIN["left"] - _MARGIN["right"]
    ph = SVG_HEIGHT - _MARGIN["top"] - _MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
        f'<rect class="frame" x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(6):
        yv = y0 + (y1 - y0) * i / 5
        xv = x0 + (x1 - x0) * i / 5
        out.append(f'<line class="tick" x1="{left - 5}" y1="{_fmt(sy(yv))}" x2="{left}" y2="{_fmt(sy(yv))}" '
                   'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(sy(yv) + 4)}" font-size="12" text-anchor="end">'
                   f'{_tick_label(yv)}</text>')
        out.append(f'<line class="tick" x1="{_fmt(sx(xv))}" y1="{top + ph}" x2="{_fmt(sx(xv))}" y2="{top + ph + 5}" '
                   'stroke="black"/>')
        out.append(f'<text x="{_fmt(sx(xv))}" y="{top + ph + 20}" font-size="12" text-anchor="middle">'
                   f'{_tick_label(round(xv))}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{SVG_HEIGHT - 15}" font-size="14" text-anchor="middle">'
               'episode</text>')
    out.append(f'<text x="18" y="{top + ph / 2:.1f}" font-size="14" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.1f})">average total reward</text>')

    for k, (name, curve) in enumerate(curves.items()):
        color = _PALETTE[k % len(_PALETTE)]
        xs = np.arange(len(curve))
        upper = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, curve.mean + curve.std)]
        lower = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs[::-1], (curve.mean - curve.std)[::-1])]
        label = escape(name, {'"': "&quot;"})
        out.append(f'<polygon class="band" data-curve="{label}" points="{" ".join(upper + lower)}" '
                   f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, curve.mean))
        out.append(f'<polyline class="mean" data-curve="{label}" points="{line}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')

    lx, ly = left + 10, top + 10
    for k, name in enumerate(curves):
        color = _PALETTE[k % len(_PALETTE)]
        y = ly + 18 * k
        out.append(f'<g class="legend-entry"><line x1="{lx}" y1="{y + 5}" x2="{lx + 20}" y2="{y + 5}" '
                   f'stroke="{color}" stroke-width="3"/><text x="{lx + 26}" y="{y + 9}" font-size="12">'
                   f'{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(curves: dict[str, AggregateCurve], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(curves), encoding="utf-8")
    return path


def final_window_mean(path: str | Path, window: int = 100, last: int = 200) -> float:
    """Mean of the smoothed extrinsic return over the final ``last`` episodes."""
    return float(np.mean(moving_average(read_returns(path), window)[-last:]))


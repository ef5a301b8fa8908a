"""Binary checkpoints and datasets, metrics CSV, config files, SVG charts.

Checkpoint layout (all little-endian)::

    offset  size  field
         0     8  magic  b"IDEMB\\x01\\x00\\x00"
         8     4  version (u32)
        12     4  dim (u32)
        16     8  user_rows (u64)
        24     8  item_rows (u64)
        32     4  tau (f32)
        36    32  config_digest (sha256)
        68     4  zero padding to a 24-byte boundary
        72        user rows, then item rows, f32 row-major

Dataset layout::

         0     6  magic b"IDDAT\\x01"
         6     1  split (0 train, 1 holdout)
         7     1  surface-set bitmask
         8     8  n_events (u64)
        16     4  n_users (u32)
        20     4  n_items (u32)
        24        user_id u32[n], item_id u32[n], surface u8[n]
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core_types import Dataset, EmbeddingTable, IdKind, IdSpace, Split, Surface
from .datagen import GeneratorConfig
from .evaluation import EpochMetrics, Stage
from .loss_grad import Temperature
from .models import TwoTowerModel


class CorruptCheckpoint(ValueError):
    """Checkpoint or dataset file failed validation; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


CKPT_MAGIC = b"IDEMB\x01\x00\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIQQf32s")  # 68 bytes
CKPT_HEADER_SIZE = 72

DATA_MAGIC = b"IDDAT\x01"
_DATA_HEADER = struct.Struct("<6sBBQII")  # 24 bytes


@dataclasses.dataclass(frozen=True)
class CheckpointHeader:
    magic: bytes
    version: int
    dim: int
    user_rows: int
    item_rows: int
    tau: float
    config_digest: bytes


def checkpoint_size(dim: int, user_rows: int, item_rows: int) -> int:
    return CKPT_HEADER_SIZE + 4 * dim * (user_rows + item_rows)


def checkpoint_bytes(model: TwoTowerModel, config_digest: bytes = b"\x00" * 32) -> bytes:
    if len(config_digest) != 32:
        raise ValueError("config_digest must be 32 bytes")
    u = np.ascontiguousarray(model.user_table.rows, dtype="<f4")
    p = np.ascontiguousarray(model.item_table.rows, dtype="<f4")
    head = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.dim, u.shape[0], p.shape[0],
                             model.temp.tau, config_digest)
    head += b"\x00" * (CKPT_HEADER_SIZE - len(head))
    return head + u.tobytes() + p.tobytes()


def save_checkpoint(model: TwoTowerModel, path, config_digest: bytes = b"\x00" * 32) -> None:
    data = checkpoint_bytes(model, config_digest)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_checkpoint_header(buf: bytes) -> CheckpointHeader:
    if len(buf) < CKPT_HEADER_SIZE:
        raise CorruptCheckpoint("header", f"file has {len(buf)} bytes, header needs {CKPT_HEADER_SIZE}")
    h = CheckpointHeader(*_CKPT_HEADER.unpack_from(buf, 0))
    if h.magic != CKPT_MAGIC:
        raise CorruptCheckpoint("magic", f"expected {CKPT_MAGIC!r}, found {h.magic!r}")
    if h.version != CKPT_VERSION:
        raise CorruptCheckpoint("version", f"expected {CKPT_VERSION}, found {h.version}")
    if h.dim < 1:
        raise CorruptCheckpoint("dim", "must be >= 1")
    return h


def load_checkpoint(
    path,
    expect_dim: int = None,
    expect_rows: Tuple[int, int] = None,
    expect_digest: bytes = None,
) -> TwoTowerModel:
    """Validate everything before building any table."""
    buf = Path(path).read_bytes()
    h = read_checkpoint_header(buf)
    if expect_dim is not None and h.dim != expect_dim:
        raise CorruptCheckpoint("dim", f"checkpoint dim {h.dim} != expected {expect_dim}")
    if expect_rows is not None:
        if h.user_rows != expect_rows[0]:
            raise CorruptCheckpoint("user_rows", f"{h.user_rows} != expected {expect_rows[0]}")
        if h.item_rows != expect_rows[1]:
            raise CorruptCheckpoint("item_rows", f"{h.item_rows} != expected {expect_rows[1]}")
    if expect_digest is not None and h.config_digest != expect_digest:
        raise CorruptCheckpoint("config_digest", "checkpoint was written under a different config")
    want = checkpoint_size(h.dim, h.user_rows, h.item_rows)
    if len(buf) != want:
        raise CorruptCheckpoint("size", f"file has {len(buf)} bytes, header implies {want}")
    n_u = h.user_rows * h.dim
    body = np.frombuffer(buf, dtype="<f4", offset=CKPT_HEADER_SIZE)
    users = body[:n_u].reshape(h.user_rows, h.dim).astype(np.float32)
    items = body[n_u:].reshape(h.item_rows, h.dim).astype(np.float32)
    return TwoTowerModel(
        EmbeddingTable(IdSpace(IdKind.USER, h.user_rows), users),
        EmbeddingTable(IdSpace(IdKind.ITEM, h.item_rows), items),
        Temperature.from_tau(float(h.tau)),
    )


# ---------------------------------------------------------------- datasets


def dataset_bytes(ds: Dataset, n_users: int, n_items: int) -> bytes:
    mask = 0
    for s in ds.surface_set:
        mask |= 1 << int(s)
    split = 0 if ds.split is Split.TRAIN else 1
    head = _DATA_HEADER.pack(DATA_MAGIC, split, mask, len(ds), n_users, n_items)
    return (head + ds.users.astype("<u4").tobytes() + ds.items.astype("<u4").tobytes()
            + ds.surfaces.astype("u1").tobytes())


def save_dataset(ds: Dataset, path, n_users: int, n_items: int) -> None:
    Path(path).write_bytes(dataset_bytes(ds, n_users, n_items))


def load_dataset(path) -> Tuple[Dataset, int, int]:
    """Returns ``(dataset, n_users, n_items)``."""
    buf = Path(path).read_bytes()
    if len(buf) < _DATA_HEADER.size:
        raise CorruptCheckpoint("header", "dataset file too short")
    magic, split, mask, n, n_users, n_items = _DATA_HEADER.unpack_from(buf, 0)
    if magic != DATA_MAGIC:
        raise CorruptCheckpoint("magic", f"expected {DATA_MAGIC!r}, found {magic!r}")
    if len(buf) != _DATA_HEADER.size + 9 * n:
        raise CorruptCheckpoint("size", f"file has {len(buf)} bytes for {n} events")
    off = _DATA_HEADER.size
    users = np.frombuffer(buf, "<u4", n, off)
    items = np.frombuffer(buf, "<u4", n, off + 4 * n)
    surf = np.frombuffer(buf, "u1", n, off + 8 * n)
    if n and (users.max() >= n_users or items.max() >= n_items):
        raise CorruptCheckpoint("ids", "id outside declared cardinality")
    surfaces = frozenset(s for s in Surface if mask >> int(s) & 1)
    ds = Dataset(users.copy(), items.copy(), surf.copy(),
                 split=Split.TRAIN if split == 0 else Split.HOLDOUT, surface_set=surfaces)
    return ds, n_users, n_items


# ---------------------------------------------------------------- metrics

METRICS_HEADER = "arm,stage,seed,epoch,split,metric,value"


def _fmt(v: float) -> str:
    return format(float(v), "#.9g")


def metrics_rows(series: Iterable[EpochMetrics]) -> List[tuple]:
    rows = []
    for m in series:
        for name, value in m.values().items():
            rows.append((m.arm, m.stage.value, m.seed, m.epoch, m.split.value, name, value))
    rows.sort(key=lambda r: r[:6])
    return rows


def metrics_text(series: Iterable[EpochMetrics]) -> str:
    lines = [METRICS_HEADER]
    for arm, stage, seed, epoch, split, name, value in metrics_rows(series):
        lines.append(f"{arm},{stage},{seed},{epoch},{split},{name},{_fmt(value)}")
    return "\n".join(lines) + "\n"


def export_metrics(series: Iterable[EpochMetrics], path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(metrics_text(series))


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER.split(","):
            raise CorruptCheckpoint("header", f"{path} is not a metrics file")
        out = []
        for r in reader:
            r["seed"] = int(r["seed"])
            r["epoch"] = int(r["epoch"])
            r["value"] = float(r["value"])
            out.append(r)
    return out


# ---------------------------------------------------------------- config files

_SURFACE_KEYS = {s.name.lower(): s for s in Surface}


def _gen_fields():
    return {f.name: f for f in dataclasses.fields(GeneratorConfig)}


def config_to_text(cfg) -> str:
    """Flat ``key = value`` text listing every knob, generator first."""
    from .pipeline import ExperimentConfig  # local: pipeline imports this module's users

    g = cfg.generator
    units = _UNITS
    lines = ["# synthetic data generator"]
    for f in dataclasses.fields(GeneratorConfig):
        if f.name == "seed":
            continue
        if f.name == "surface_mix":
            for s in Surface:
                lines.append(f"surface_mix.{s.name.lower()} = {g.surface_mix.get(s, 0.0)!r}"
                             "  # fraction of events")
            continue
        lines.append(f"{f.name} = {_value_text(getattr(g, f.name))}  # {units.get(f.name, '')}".rstrip(" #"))
    lines.append("")
    lines.append("# model, optimizers, schedule")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("generator", "seeds"):
            continue
        lines.append(f"{f.name} = {_value_text(getattr(cfg, f.name))}  # {units.get(f.name, '')}".rstrip(" #"))
    lines.append("")
    lines.append(f"seed_list = {','.join(str(s) for s in cfg.seeds)}")
    return "\n".join(lines) + "\n"


def _value_text(v) -> str:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


_UNITS = {
    "n_users": "count", "n_items": "count", "n_topics": "count",
    "zipf_exponent": "dimensionless, popularity ~ rank^-s",
    "affinity_strength": "nats per unit topic overlap",
    "topic_concentration": "gamma shape of topic draws",
    "events_per_user": "downstream events per user",
    "coverage_ratio": "pretrain events / downstream events",
    "holdout_fraction": "holdout size / train size",
    "dim": "embedding width", "init_scale": "init bound is init_scale/sqrt(dim)",
    "batch_size": "positives per step", "n_uniform_negatives": "shared per contrastive batch",
    "bce_negatives": "uniform negatives per positive",
    "embed_lr": "adagrad step size", "embed_eps": "adagrad denominator floor",
    "embed_weight_decay": "l2 coefficient", "downstream_embed_lr": "adagrad step size",
    "mlp_lr": "adam step size", "temp_lr": "adam step size on log tau",
    "tau_init": "temperature", "tau_min": "temperature", "tau_max": "temperature",
    "hidden": "mlp widths", "pretrain_epochs": "passes", "downstream_epochs": "passes",
    "single_stage_lambda": "contrastive weight", "k": "hit@k cutoff",
    "n_candidates": "positive + sampled items", "overfit_threshold": "absolute hit@k",
}


class ConfigError(ValueError):
    pass


def parse_config(text: str):
    """Inverse of :func:`config_to_text`; unknown keys are errors."""
    from .pipeline import Arm, ExperimentConfig, PretrainLoss

    gen_fields = _gen_fields()
    exp_fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    gen_kw: Dict[str, object] = {}
    exp_kw: Dict[str, object] = {}
    mix: Dict[Surface, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            if key.startswith("surface_mix."):
                name = key.split(".", 1)[1]
                if name not in _SURFACE_KEYS:
                    raise ConfigError(f"line {lineno}: unknown surface {name!r}")
                mix[_SURFACE_KEYS[name]] = float(value)
            elif key == "seed_list":
                exp_kw["seeds"] = tuple(int(s) for s in value.split(",") if s.strip())
            elif key in gen_fields and key != "seed":
                gen_kw[key] = _coerce(gen_fields[key].type, value)
            elif key == "hidden":
                exp_kw[key] = tuple(int(x) for x in value.split(","))
            elif key == "arm":
                exp_kw[key] = Arm(value)
            elif key == "pretrain_loss":
                exp_kw[key] = PretrainLoss(value)
            elif key in exp_fields and key not in ("generator", "seeds"):
                exp_kw[key] = _coerce(exp_fields[key].type, value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from e
    if mix:
        gen_kw["surface_mix"] = mix
    try:
        return ExperimentConfig(generator=GeneratorConfig(**gen_kw), **exp_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _coerce(type_name, value: str):
    t = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", "")
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    return value


def load_config(path):
    return parse_config(Path(path).read_text())


def config_digest(cfg) -> bytes:
    """sha256 over everything that fixes a checkpoint's meaning.

    That is the generator (including the run seed, which picks the world)
    and the embedding width.  Optimizer and schedule knobs are left out so a
    downstream run may change them without invalidating the checkpoint.
    """
    g = dataclasses.replace(cfg.generator, seed=cfg.seed)
    lines = [f"{f.name}={getattr(g, f.name)!r}" for f in dataclasses.fields(GeneratorConfig)
             if f.name != "surface_mix"]
    lines += [f"surface_mix.{s.name.lower()}={g.surface_mix.get(s, 0.0)!r}" for s in Surface]
    lines.append(f"dim={cfg.dim}")
    return hashlib.sha256("\n".join(lines).encode()).digest()


# ---------------------------------------------------------------- svg

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def line_chart_svg(series: Dict[str, Sequence[Tuple[float, float]]], title: str,
                   xlabel: str = "epoch", ylabel: str = "holdout hit@3",
                   width: int = 640, height: int = 400) -> str:
    """One polyline per named series, plain axes, legend on the right."""
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 60, 170, 30, 50
    pw, ph = width - left - right, height - top - bottom
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1e-3
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    sx = lambda x: left + pw * (x - x0) / (x1 - x0)
    sy = lambda y: top + ph * (1 - (y - y0) / (y1 - y0))
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
              f'font-family="sans-serif" font-size="12">\n')
    out.write(f'<text x="{left}" y="18">{title}</text>\n')
    out.write(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>\n')
    out.write(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>\n')
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.write(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3f}</text>\n')
    xs = sorted({p[0] for p in pts}) or [0]
    for xv in xs:
        out.write(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>\n')
    out.write(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>\n')
    out.write(f'<text x="14" y="{top + ph / 2}" transform="rotate(-90 14 {top + ph / 2})" '
              f'text-anchor="middle">{ylabel}</text>\n')
    for n, (name, s) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.write(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{poly}"/>\n')
        ly = top + 16 * n + 8
        out.write(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                  f'stroke="{color}" stroke-width="2"/>\n')
        out.write(f'<text x="{left + pw + 35}" y="{ly + 4}">{name}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()

"""Synthetic multi-domain epochs and the on-disk corpus format.

Each trial is ``gain_d * P_d @ (Q @ S + noise)`` where ``S`` holds latent
sources (band-limited background activity plus a phase-locked, class-specific
oscillation), ``Q`` is a random orthogonal mixing shared by all domains and
``P_d`` is a per-domain symmetric positive-definite distortion whose distance
from the identity grows with ``shift``. Sample values are rounded to float32
precision so a save/load round trip is exact.

Corpus layout: ``manifest.json`` plus one ``domain_<id>.bin`` per domain::

    magic   b"ABATEPO"                     7 bytes
    version u32 LE
    n       u32 LE  trials
    C       u32 LE  channels
    T       u32 LE  timepoints
    data    n*C*T float32 LE, row-major (trial, channel, time)
    labels  n int32 LE
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .trials import DomainDataset

CORPUS_MAGIC = b"ABATEPO"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<IIII")


class CorpusFormatError(ValueError):
    """A corpus file is malformed, truncated or holds non-finite values."""


@dataclass
class GenSpec:
    n_domains: int = 3
    trials_per_domain: int = 120
    channels: int = 8
    timepoints: int = 128
    classes: int = 4
    class_ratios: list[float] | None = None
    shift: float = 0.6
    gain_spread: float = 2.0
    noise: float = 1.5
    signal: float = 1.0
    jitter: float = 0.6
    band: tuple[float, float] = (4.0, 32.0)
    fs: float = 128.0
    seed: int = 0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.n_domains < 1 or self.trials_per_domain < 1:
            raise ValueError("need at least one domain with one trial")
        if self.class_ratios is None:
            self.class_ratios = [1.0 / self.classes] * self.classes
        ratios = np.asarray(self.class_ratios, dtype=float)
        if len(ratios) != self.classes or np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_ratios must be {self.classes} positive values summing to 1")
        self.band = tuple(self.band)
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.classes)]

    @classmethod
    def erp_like(cls, **overrides) -> "GenSpec":
        """Two classes with 1:5 target/non-target imbalance."""
        base = dict(classes=2, class_ratios=[5 / 6, 1 / 6], class_names=["nontarget", "target"])
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        return d


def _class_counts(n: int, ratios: np.ndarray) -> np.ndarray:
    raw = ratios * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts


def _band_noise(rng: np.random.Generator, shape, fs: float, band) -> np.ndarray:
    t = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(t, d=1.0 / fs)
    keep = (freqs >= band[0]) & (freqs <= band[1])
    weight = np.where(keep, 1.0 / np.sqrt(np.maximum(freqs, 1.0)), 0.0)
    x = np.fft.irfft(spec * weight, n=t, axis=-1)
    return x / x.std()


def _spd_distortion(rng: np.random.Generator, c: int, strength: float) -> np.ndarray:
    a = rng.standard_normal((c, c)) / np.sqrt(c)
    sym = (a + a.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.exp(strength * vals)) @ vecs.T


def generate(spec: GenSpec) -> list[DomainDataset]:
    """Deterministically generate ``spec.n_domains`` labelled domains."""
    rng = np.random.default_rng(spec.seed)
    c, t, k = spec.channels, spec.timepoints, spec.classes
    q, _ = np.linalg.qr(rng.standard_normal((c, c)))
    times = np.arange(t) / spec.fs
    window = np.hanning(t)
    freqs = np.linspace(spec.band[0] + 5.0, spec.band[1] - 6.0, k)
    phases = rng.uniform(0, 2 * np.pi, size=k)
    src_of_class = np.arange(k) % c
    counts = _class_counts(spec.trials_per_domain, np.asarray(spec.class_ratios))

    domains = []
    for d in range(spec.n_domains):
        drng = np.random.default_rng([spec.seed, d])
        if spec.shift > 0:
            distortion = _spd_distortion(drng, c, spec.shift)
        else:
            drng.standard_normal((c, c))  # keep stream positions aligned with shift > 0
            distortion = np.eye(c)
        gain = float(np.exp(spec.shift * spec.gain_spread * drng.uniform(-1.0, 1.0)))
        labels = drng.permutation(np.repeat(np.arange(k), counts))
        n = len(labels)
        sources = _band_noise(drng, (n, c, t), spec.fs, spec.band)
        jit = drng.uniform(-spec.jitter, spec.jitter, size=n)
        amp = 1.0 + 0.2 * drng.standard_normal(n)
        for i, y in enumerate(labels):
            wave = np.sin(2 * np.pi * freqs[y] * times + phases[y] + jit[i]) * window
            sources[i, src_of_class[y]] += spec.signal * amp[i] * wave * np.sqrt(2.0)
        mixed = np.matmul(q, sources) + spec.noise * drng.standard_normal((n, c, t))
        x = gain * np.matmul(distortion, mixed)
        x = x.astype(np.float32).astype(np.float64)
        domains.append(DomainDataset(str(d), x, labels))
    return domains


# ---------------------------------------------------------------- corpus IO


def write_domain(path: Path, domain: DomainDataset) -> None:
    x = np.ascontiguousarray(domain.X, dtype="<f4")
    if not np.all(np.isfinite(x)):
        raise CorpusFormatError(f"domain {domain.domain}: non-finite values")
    n, c, t = x.shape
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(_HEADER.pack(CORPUS_VERSION, n, c, t))
        fh.write(x.tobytes())
        fh.write(np.ascontiguousarray(domain.y, dtype="<i4").tobytes())


def read_domain(path: Path, domain_id: str) -> DomainDataset:
    raw = Path(path).read_bytes()
    if raw[: len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {raw[:len(CORPUS_MAGIC)]!r}")
    off = len(CORPUS_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise CorpusFormatError(f"{path}: truncated header")
    version, n, c, t = _HEADER.unpack_from(raw, off)
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    off += _HEADER.size
    expected = off + 4 * n * c * t + 4 * n
    if len(raw) != expected:
        raise CorpusFormatError(
            f"{path}: header declares {n} trials of {c}x{t} ({expected} bytes), file has {len(raw)} bytes"
        )
    x = np.frombuffer(raw, dtype="<f4", count=n * c * t, offset=off).reshape(n, c, t)
    if not np.all(np.isfinite(x)):
        raise CorpusFormatError(f"{path}: non-finite sample values")
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 4 * n * c * t)
    return DomainDataset(domain_id, x.astype(np.float64), y.astype(np.int64))


def save_corpus(directory, domains: list[DomainDataset], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and one blob per domain into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in domains:
        fname = f"domain_{d.domain}.bin"
        write_domain(directory / fname, d)
        entries.append({"id": d.domain, "file": fname, "n_trials": len(d)})
    c, t = domains[0].shape
    manifest = {
        "format": CORPUS_MAGIC.decode(),
        "version": CORPUS_VERSION,
        "channels": c,
        "timepoints": t,
        "domains": entries,
    }
    manifest.update(meta or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_corpus(directory) -> tuple[list[DomainDataset], dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CorpusFormatError(f"{directory}: no manifest.json") from exc
    if manifest.get("format") != CORPUS_MAGIC.decode() or manifest.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"{directory}: manifest is not an {CORPUS_MAGIC.decode()} v{CORPUS_VERSION} corpus")
    domains = []
    for entry in manifest["domains"]:
        d = read_domain(directory / entry["file"], str(entry["id"]))
        if len(d) != entry["n_trials"]:
            raise CorpusFormatError(f"domain {entry['id']}: manifest says {entry['n_trials']} trials, blob has {len(d)}")
        if d.shape != (manifest["channels"], manifest["timepoints"]):
            raise CorpusFormatError(f"domain {entry['id']}: shape {d.shape} disagrees with manifest")
        domains.append(d)
    return domains, manifest

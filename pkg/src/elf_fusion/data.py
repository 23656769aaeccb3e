"""Samples, synthetic data, augmentation and the on-disk dataset layout.

Layout: ``<root>/<split>/<sample_id>/{fundus.elft, oct.elft, label.txt}``
where ``label.txt`` holds a single ASCII digit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import elft
from .config import FusionConfig, SynthSpec, TrainConfig
from .errors import FormatError
from .tensor import Tensor

logger = logging.getLogger(__name__)

GRADE_NAMES = ("None", "Early", "Mid-Advanced")


@dataclass
class ModalPair:
    fundus: Tensor
    oct: Tensor
    label: int
    sample_id: str = ""


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def fundus_patch(hw: tuple[int, int]) -> tuple[slice, slice]:
    h, w = hw
    return slice(h // 4, h // 2), slice(w // 4, w // 2)


def oct_subvolume(thw: tuple[int, int, int]) -> tuple[slice, slice, slice]:
    t, h, w = thw
    return slice(t // 4, max(t // 4 + 1, 3 * t // 4)), slice(h // 4, h // 2), slice(w // 2, 3 * w // 4)


def synth_dataset(spec: SynthSpec, cfg: FusionConfig) -> list[ModalPair]:
    """Gaussian noise plus a class-scaled offset in a fixed region of each modality.

    Class c adds ``c * mu_f`` to a fundus patch (all three channels) and
    ``c * mu_o`` to an OCT sub-volume, so either modality alone carries the
    label and the two together carry it with less noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.synth_seed)
    fh, fw = cfg.fundus_input_hw
    t, oh, ow = cfg.oct_input_thw
    rows, cols = fundus_patch((fh, fw))
    ts, orows, ocols = oct_subvolume((t, oh, ow))
    labels = np.repeat(np.arange(cfg.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(labels.size)]
    samples = []
    for i, c in enumerate(labels):
        fundus = rng.normal(0.0, spec.sigma, size=(3, fh, fw))
        fundus[:, rows, cols] += c * spec.mu_f
        volume = rng.normal(0.0, spec.sigma, size=(t, 1, oh, ow))
        volume[ts, 0, orows, ocols] += c * spec.mu_o
        samples.append(
            ModalPair(Tensor(fundus, dtype=cfg.dtype), Tensor(volume, dtype=cfg.dtype), int(c), f"s{i:04d}")
        )
    return samples


def split_dataset(samples: list[ModalPair], train_fraction: float = 0.8, seed: int = 0):
    """Seeded random split into (train, test)."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int, start: float, length: float) -> np.ndarray:
    """Linear interpolation weights sampling ``[start, start+length)`` of n_in pixels at n_out centers."""
    m = np.zeros((n_out, n_in))
    centers = start + (np.arange(n_out) + 0.5) * length / n_out - 0.5
    centers = np.clip(centers, 0, n_in - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def crop_resize(img: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the crop ``[top:top+height, left:left+width]`` back to the full size."""
    h, w = img.shape[-2:]
    rh = _interp_matrix(h, h, top, height)
    rw = _interp_matrix(w, w, left, width)
    return (rh @ img @ rw.T).astype(img.dtype)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1, :].copy()


def augment_fundus(x: Tensor, rng: np.random.Generator, cfg: TrainConfig) -> Tensor:
    """Random resized crop, horizontal flip, vertical flip, quarter-turn rotation, in that order."""
    img = x.data
    if not cfg.augment:
        return Tensor(img, dtype=img.dtype)
    h, w = img.shape[-2:]
    if cfg.fundus_crop:
        area = rng.uniform(cfg.fundus_crop_min_scale, 1.0)
        ch = max(1, min(h, int(round(np.sqrt(area) * h))))
        cw = max(1, min(w, int(round(np.sqrt(area) * w))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = crop_resize(img, top, left, ch, cw)
    if cfg.fundus_hflip and rng.random() < 0.5:
        img = hflip(img)
    if cfg.fundus_vflip and rng.random() < 0.5:
        img = vflip(img)
    if cfg.fundus_rotate:
        # odd quarter turns would swap H and W on non-square inputs
        turns = int(rng.integers(0, 4)) if h == w else 2 * int(rng.integers(0, 2))
        img = np.rot90(img, turns, axes=(-2, -1)).copy()
    return Tensor(img, dtype=img.dtype)


def standardize_oct(volume: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std per volume; a constant volume is returned unchanged."""
    std = volume.std()
    if std == 0:
        logger.warning("zero-variance OCT volume: skipping standardization")
        return volume.copy()
    return ((volume - volume.mean()) / std).astype(volume.dtype)


def augment_oct(y: Tensor, rng: np.random.Generator, cfg: TrainConfig) -> Tensor:
    """Center crop + resize, one horizontal flip decision for all slices, then standardization."""
    vol = y.data
    if cfg.augment:
        h, w = vol.shape[-2:]
        if cfg.oct_crop:
            ch = max(1, int(round(cfg.oct_crop_fraction * h)))
            cw = max(1, int(round(cfg.oct_crop_fraction * w)))
            vol = crop_resize(vol, (h - ch) // 2, (w - cw) // 2, ch, cw)
        if cfg.oct_hflip and rng.random() < 0.5:
            vol = hflip(vol)
    return Tensor(standardize_oct(vol), dtype=vol.dtype)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream keyed by (seed, epoch, sample index)."""
    return np.random.default_rng([seed, 1, epoch, index])


def prepare_train(sample: ModalPair, rng: np.random.Generator, cfg: TrainConfig) -> ModalPair:
    return ModalPair(
        augment_fundus(sample.fundus, rng, cfg), augment_oct(sample.oct, rng, cfg), sample.label, sample.sample_id
    )


def prepare_eval(sample: ModalPair) -> ModalPair:
    vol = sample.oct.data
    return ModalPair(sample.fundus, Tensor(standardize_oct(vol), dtype=vol.dtype), sample.label, sample.sample_id)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_split(root: str | Path, split: str, samples: list[ModalPair]) -> None:
    base = Path(root) / split
    for s in samples:
        d = base / s.sample_id
        d.mkdir(parents=True, exist_ok=True)
        elft.save(d / "fundus.elft", s.fundus)
        elft.save(d / "oct.elft", s.oct)
        elft.atomic_write_text(d / "label.txt", f"{s.label}\n")


def read_split(root: str | Path, split: str, cfg: FusionConfig) -> list[ModalPair]:
    """Load and validate every sample of a split; both modalities are always read."""
    base = Path(root) / split
    if not base.is_dir():
        raise FormatError(f"dataset split not found: {base}")
    want_f = (3,) + tuple(cfg.fundus_input_hw)
    t, h, w = cfg.oct_input_thw
    want_o = (t, 1, h, w)
    samples = []
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        try:
            fundus = elft.load(d / "fundus.elft")
            oct_ = elft.load(d / "oct.elft")
            raw = (d / "label.txt").read_text().strip()
        except FileNotFoundError as exc:
            raise FormatError(f"{d}: missing file {Path(exc.filename).name}") from None
        except FormatError as exc:
            raise FormatError(f"{d}: {exc}") from None
        if fundus.dims != want_f:
            raise FormatError(f"{d / 'fundus.elft'}: dims {fundus.dims}, expected {want_f}")
        if oct_.dims != want_o:
            raise FormatError(f"{d / 'oct.elft'}: dims {oct_.dims}, expected {want_o}")
        if len(raw) != 1 or not raw.isdigit() or int(raw) >= cfg.num_classes:
            raise FormatError(f"{d / 'label.txt'}: expected a single digit 0..{cfg.num_classes - 1}, got {raw!r}")
        dt = np.dtype(cfg.dtype)
        samples.append(
            ModalPair(Tensor(fundus.data, dtype=dt), Tensor(oct_.data, dtype=dt), int(raw), d.name)
        )
    if not samples:
        raise FormatError(f"dataset split {base} is empty")
    return samples

"""Adam, the training loop, evaluation and the ablation harness."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import elft
from .config import MODES, FusionConfig, TrainConfig
from .data import ModalPair, prepare_eval, prepare_train, sample_rng
from .errors import FormatError, NumericError, ParameterError
from .fusion import Params, forward, init_params, mode_params
from .metrics import ConfusionMatrix, MetricsReport, report
from .tensor import Tensor, backward, cross_entropy, no_grad, stack

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of ``params`` in place.

    Gradients are checked before anything is touched, so a non-finite
    gradient aborts the whole step.
    """
    if t < 1:
        raise ParameterError(f"Adam step count must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.t = t


class Adam:
    def __init__(self, params: Params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            self.state.t + 1,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float


@dataclass
class TrainResult:
    params: Params
    log: list[EpochLog]
    mode: str

    def log_csv(self) -> str:
        lines = ["epoch,loss,train_acc"]
        lines += [f"{e.epoch},{e.loss!r},{e.train_acc!r}" for e in self.log]
        return "\n".join(lines) + "\n"


def predict(logits: Tensor) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(logits.data))


def dataset_loss(dataset: list[ModalPair], params: Params, cfg: FusionConfig, mode: str) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on evaluation-prepared samples, without gradients."""
    losses, hits = [], 0
    with no_grad():
        for s in dataset:
            s = prepare_eval(s)
            logits = forward(s, params, cfg, mode)
            losses.append(float(cross_entropy(logits, s.label).data))
            hits += predict(logits) == s.label
    return float(np.mean(losses)), hits / len(dataset)


def train(
    dataset: list[ModalPair],
    cfg: FusionConfig,
    tcfg: TrainConfig,
    mode: str = "full",
    params: Params | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy.

    Epoch 0 of the log is the loss/accuracy of the initial parameters on the
    unaugmented data; epochs 1.. record the running loss and accuracy of the
    augmented training batches.
    """
    if not dataset:
        raise ParameterError("cannot train on an empty dataset")
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    tcfg.validate()
    if params is None:
        params = init_params(cfg, tcfg.seed)
    active = mode_params(params, mode)
    opt = Adam(active, tcfg.learning_rate, (tcfg.beta1, tcfg.beta2), tcfg.eps)

    loss0, acc0 = dataset_loss(dataset, params, cfg, mode)
    log = [EpochLog(0, loss0, acc0)]
    if on_epoch:
        on_epoch(log[-1])

    n = len(dataset)
    for epoch in range(1, tcfg.epochs + 1):
        order = np.random.default_rng([tcfg.seed, 0, epoch]).permutation(n)
        total_loss, hits = 0.0, 0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start : start + tcfg.batch_size]
            batch = [prepare_train(dataset[i], sample_rng(tcfg.seed, epoch, int(i)), tcfg) for i in idx]
            opt.zero_grad()
            logits = stack([forward(s, params, cfg, mode) for s in batch])
            labels = np.array([s.label for s in batch])
            try:
                loss = cross_entropy(logits, labels)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(loss)
            opt.step()
            total_loss += float(loss.data) * len(batch)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        log.append(EpochLog(epoch, total_loss / n, hits / n))
        if on_epoch:
            on_epoch(log[-1])
    return TrainResult(params, log, mode)


def evaluate(dataset: list[ModalPair], params: Params, cfg: FusionConfig, mode: str = "full", name: str = "") -> MetricsReport:
    """Argmax predictions on standardized, unaugmented samples."""
    if not dataset:
        raise ParameterError("cannot evaluate on an empty dataset")
    cm = ConfusionMatrix(cfg.num_classes)
    with no_grad():
        for s in dataset:
            cm.accumulate(s.label, predict(forward(prepare_eval(s), params, cfg, mode)))
    return report(cm, name or mode)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

# (mode, fundus, oct, lm, gm) in the row order of the ablation table
ABLATION_ROWS = (
    ("fundus_only", True, False, False, False),
    ("oct_only", False, True, False, False),
    ("concat_only", True, True, False, False),
    ("lm_only", True, True, True, False),
    ("gm_only", True, True, False, True),
    ("full", True, True, True, True),
)


@dataclass
class AblationRow:
    mode: str
    fundus: bool
    oct: bool
    lm: bool
    gm: bool
    report: MetricsReport


def ablate(
    train_set: list[ModalPair],
    cfg: FusionConfig,
    tcfg: TrainConfig,
    eval_set: list[ModalPair] | None = None,
    modes: tuple[str, ...] | None = None,
) -> list[AblationRow]:
    """Train and evaluate each ablation configuration from the same seed."""
    eval_set = eval_set if eval_set is not None else train_set
    rows = []
    for mode, f, o, lm, gm in ABLATION_ROWS:
        if modes is not None and mode not in modes:
            continue
        logger.info("ablation: training %s", mode)
        result = train(train_set, cfg, tcfg, mode)
        rows.append(AblationRow(mode, f, o, lm, gm, evaluate(eval_set, result.params, cfg, mode)))
    return rows


def _tick(flag: bool) -> str:
    return "x" if flag else ""


def render_ablation(rows: list[AblationRow]) -> str:
    lines = [f"{'Fundus':^6}  {'OCT':^3}  {'LM':^2}  {'GM':^2}  {'Acc':>5}  {'Kappa':>6}  mode"]
    for r in rows:
        lines.append(
            f"{_tick(r.fundus):^6}  {_tick(r.oct):^3}  {_tick(r.lm):^2}  {_tick(r.gm):^2}  "
            f"{r.report.acc:5.3f}  {r.report.kappa:6.3f}  {r.mode}"
        )
    return "\n".join(lines) + "\n"


ABLATION_CSV_COLUMNS = ("fundus", "oct", "lm", "gm", "acc", "kappa")


def ablation_csv(rows: list[AblationRow]) -> str:
    lines = [",".join(ABLATION_CSV_COLUMNS)]
    for r in rows:
        flags = [str(int(x)) for x in (r.fundus, r.oct, r.lm, r.gm)]
        lines.append(",".join(flags + [repr(r.report.acc), repr(r.report.kappa)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(directory: str | Path, params: Params, mode: str, cfg: FusionConfig) -> None:
    """ELFT file per parameter plus a manifest of names and dims; manifest written last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in mode_params(params, mode).items():
        fname = f"{name}.elft"
        elft.save(directory / fname, p)
        entries.append({"name": name, "dims": list(p.dims), "file": fname})
    manifest = {"format": "elf-checkpoint", "version": 1, "mode": mode, "config": asdict(cfg), "params": entries}
    elft.atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory: str | Path, cfg: FusionConfig) -> tuple[Params, str]:
    """Load a checkpoint, checking every tensor against the dims ``cfg`` implies."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise FormatError(f"checkpoint manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    mode = manifest.get("mode")
    if mode not in MODES:
        raise FormatError(f"{path}: unknown mode {mode!r}")
    expected = mode_params(init_params(cfg, 0), mode)
    params: Params = {}
    for entry in manifest.get("params", []):
        name = entry["name"]
        if name not in expected:
            raise FormatError(f"{path}: unexpected tensor {name}")
        want = expected[name].dims
        if tuple(entry["dims"]) != want:
            raise FormatError(f"tensor {name}: manifest dims {tuple(entry['dims'])} do not match config dims {want}")
        arr = elft.load_array(directory / entry["file"])
        if arr.shape != want:
            raise FormatError(f"tensor {name}: file dims {arr.shape} do not match config dims {want}")
        params[name] = Tensor(arr, requires_grad=True, dtype=np.dtype(cfg.dtype))
    missing = sorted(set(expected) - set(params))
    if missing:
        raise FormatError(f"{path}: missing tensors {', '.join(missing)}")
    return params, mode

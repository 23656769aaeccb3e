import dataclasses
import math
import sys

import numpy as np
import pytest

from elf_fusion import data as data_mod
from elf_fusion.config import FusionConfig, SynthSpec, TrainConfig
from elf_fusion.data import synth_dataset
from elf_fusion.errors import FormatError, NumericError, ParameterError
from elf_fusion.fusion import init_params, mode_params
from elf_fusion.train import (
    ABLATION_CSV_COLUMNS,
    AdamState,
    ablate,
    ablation_csv,
    adam_step,
    evaluate,
    load_checkpoint,
    predict,
    render_ablation,
    save_checkpoint,
    train,
)
from elf_fusion.tensor import Tensor
from oracles import adam_scalar


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1, 0.001)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 1, 0.001)
    assert p["w"][0] == pytest.approx(-0.001, abs=1e-10)


def test_adam_equal_gradients_update_equally():
    p = {"a": np.array([0.3]), "b": np.array([0.3])}
    g = {"a": np.array([0.7]), "b": np.array([0.7])}
    state = AdamState()
    for t in range(1, 4):
        adam_step(p, g, state, t, 0.01)
    assert p["a"].tobytes() == p["b"].tobytes()


def test_adam_matches_scalar_oracle(rng):
    for _ in range(50):
        theta, m, v = rng.normal(), 0.0, 0.0
        p = {"w": np.array([theta])}
        state = AdamState()
        for t in range(1, int(rng.integers(1, 6)) + 1):
            g = rng.normal()
            lr = float(rng.uniform(1e-4, 1e-1))
            adam_step(p, {"w": np.array([g])}, state, t, lr)
            theta, m, v = adam_scalar(theta, g, m, v, t, lr)
            assert abs(p["w"][0] - theta) <= 1e-12


def test_adam_aborts_on_non_finite_before_touching_anything():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamState()
    with pytest.raises(NumericError, match="b"):
        adam_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state, 1, 0.1)
    assert p["a"][0] == 1.0 and not state.m


def test_adam_step_count_validated():
    with pytest.raises(ParameterError):
        adam_step({}, {}, AdamState(), 0, 0.1)


# --- training ------------------------------------------------------------------


def test_lr_zero_is_identity(cfg, tiny_set):
    before = init_params(cfg, 0)
    result = train(tiny_set, cfg, TrainConfig(epochs=2, learning_rate=0.0, batch_size=4))
    assert all(result.params[k].data.tobytes() == before[k].data.tobytes() for k in before)


def test_training_is_deterministic(cfg, tiny_set, quick_train):
    a = train(tiny_set, cfg, quick_train)
    b = train(tiny_set, cfg, quick_train)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert a.log_csv() == b.log_csv()


def test_only_mode_params_change(cfg, tiny_set, quick_train):
    before = init_params(cfg, 0)
    result = train(tiny_set, cfg, quick_train, "fundus_only")
    active = mode_params(before, "fundus_only")
    for k in before:
        same = result.params[k].data.tobytes() == before[k].data.tobytes()
        assert same == (k not in active), k


def test_every_sample_once_per_epoch(cfg, tiny_set, monkeypatch):
    seen: list[str] = []
    real = data_mod.prepare_train

    def spy(sample, rng, tcfg):
        seen.append(sample.sample_id)
        return real(sample, rng, tcfg)

    monkeypatch.setattr(sys.modules["elf_fusion.train"], "prepare_train", spy)
    train(tiny_set, cfg, TrainConfig(epochs=3, batch_size=4))
    n = len(tiny_set)
    ids = sorted(s.sample_id for s in tiny_set)
    for e in range(3):
        assert sorted(seen[e * n : (e + 1) * n]) == ids
    assert seen[:n] != seen[n : 2 * n]  # reshuffled


def test_initial_loss_near_ln3(cfg):
    ds = synth_dataset(SynthSpec(samples_per_class=4), cfg)
    result = train(ds, cfg, TrainConfig(epochs=0))
    assert result.log[0].epoch == 0
    assert abs(result.log[0].loss - math.log(3)) < 0.3


def test_log_csv_format(cfg, tiny_set, quick_train):
    lines = train(tiny_set, cfg, quick_train).log_csv().splitlines()
    assert lines[0] == "epoch,loss,train_acc"
    assert len(lines) == 1 + 1 + quick_train.epochs


def test_float32_training_runs(tiny_set):
    cfg32 = FusionConfig(dtype="float32")
    ds = [
        dataclasses.replace(s, fundus=Tensor(s.fundus.data, dtype="float32"), oct=Tensor(s.oct.data, dtype="float32"))
        for s in tiny_set
    ]
    result = train(ds, cfg32, TrainConfig(epochs=1, batch_size=3))
    assert result.params["classifier.weight"].dtype == np.float32
    assert np.isfinite(result.log[-1].loss)


def test_empty_dataset_rejected(cfg):
    with pytest.raises(ParameterError):
        train([], cfg, TrainConfig())
    with pytest.raises(ParameterError):
        evaluate([], init_params(cfg, 0), cfg)


# --- evaluation ----------------------------------------------------------------


def test_predict_ties_go_to_lowest_class():
    assert predict(Tensor([1.0, 3.0, 3.0])) == 1
    assert predict(Tensor([0.0, 0.0, 0.0])) == 0


def test_evaluate_deterministic(cfg, params, tiny_set):
    a = evaluate(tiny_set, params, cfg)
    b = evaluate(tiny_set, params, cfg)
    assert (a.acc, a.kappa, a.n) == (b.acc, b.kappa, b.n) and a.n == len(tiny_set)


def test_constant_predictor_exercises_degenerate_kappa(cfg, tiny_set):
    params = init_params(cfg, 0)
    params["classifier.weight"].data[:] = 0
    params["classifier.bias"].data[:] = [0.0, 1.0, 0.0]
    r = evaluate(tiny_set, params, cfg)
    assert r.acc == pytest.approx(1 / 3) and r.kappa == 0.0


def test_uninformative_data_gives_chance_accuracy(cfg):
    accs = []
    for seed in range(3):
        spec = SynthSpec(samples_per_class=12, mu_f=0.0, mu_o=0.0, synth_seed=100 + seed)
        held_out = synth_dataset(dataclasses.replace(spec, samples_per_class=50, synth_seed=200 + seed), cfg)
        result = train(synth_dataset(spec, cfg), cfg, TrainConfig(epochs=10, seed=seed))
        accs.append(evaluate(held_out, result.params, cfg).acc)
    assert abs(np.mean(accs) - 1 / 3) <= 0.15, accs


# --- ablation and checkpoints ---------------------------------------------------


def test_ablation_rows_match_standalone_runs(cfg, tiny_set, quick_train):
    rows = ablate(tiny_set, cfg, quick_train)
    assert [r.mode for r in rows] == ["fundus_only", "oct_only", "concat_only", "lm_only", "gm_only", "full"]
    flags = [(r.fundus, r.oct, r.lm, r.gm) for r in rows]
    assert flags[-1] == (True, True, True, True) and flags[0] == (True, False, False, False)
    for r in rows:
        alone = evaluate(tiny_set, train(tiny_set, cfg, quick_train, r.mode).params, cfg, r.mode)
        assert (alone.acc, alone.kappa) == (r.report.acc, r.report.kappa)
    csv = ablation_csv(rows).splitlines()
    assert csv[0] == ",".join(ABLATION_CSV_COLUMNS) and len(csv) == 7
    assert len(render_ablation(rows).splitlines()) == 7


def test_checkpoint_roundtrip(cfg, params, tmp_path):
    save_checkpoint(tmp_path / "ck", params, "lm_only", cfg)
    loaded, mode = load_checkpoint(tmp_path / "ck", cfg)
    assert mode == "lm_only"
    assert set(loaded) == set(mode_params(params, "lm_only"))
    assert all(loaded[k].data.tobytes() == params[k].data.tobytes() for k in loaded)


def test_checkpoint_dims_mismatch_names_tensor(cfg, params, tmp_path):
    save_checkpoint(tmp_path / "ck", params, "full", cfg)
    other = dataclasses.replace(cfg, fused_width=512)
    with pytest.raises(FormatError, match="lm_head.weight"):
        load_checkpoint(tmp_path / "ck", other)


def test_missing_checkpoint(cfg, tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_checkpoint(tmp_path / "nothing", cfg)

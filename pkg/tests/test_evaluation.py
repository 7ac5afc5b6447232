from __future__ import annotations

import math

import numpy as np
import pytest

from nests6.data import (
    DriftKind,
    DriftSpec,
    Normalizer,
    SynthConfig,
    split_bounds,
    synth_generate,
    window_arrays,
)
from nests6.evaluation import (
    MetricReport,
    PersistenceModel,
    count_macs,
    drift_eval,
    evaluate_one_step,
    mae_rmse,
    per_pixel_rmse_map,
    read_pgm,
    report_row,
    rollout,
    rollout_eval,
    write_mac_ledger,
    write_pgm,
    write_report,
)
from nests6.model import ModelConfig, NestS6
from nests6.tensor import Tensor

UNIT = Normalizer(0.0, 1.0)


class LinearExtrapolator:
    """Exact forecaster for series that are linear in time."""

    slow = None

    def forward(self, x_seq, memory=None, surprise=None):
        x = np.asarray(x_seq)
        return Tensor(2 * x[:, -1] - x[:, -2]), memory


# ---------------------------------------------------------------- metrics
def test_metric_examples():
    r = mae_rmse(np.array([3.0, -4.0]), np.zeros(2), UNIT)
    assert r.mae == 3.5 and r.rmse == pytest.approx(math.sqrt(12.5))
    z = mae_rmse(np.ones((2, 3)), np.ones((2, 3)), UNIT)
    assert z.mae == z.rmse == 0.0


def test_metrics_are_in_raw_units(rng):
    norm = Normalizer(10.0, 4.0)
    p, t = rng.standard_normal((5, 3, 3)), rng.standard_normal((5, 3, 3))
    r = mae_rmse(p, t, norm)
    d = [(a * 4.0 + 10.0) - (b * 4.0 + 10.0) for a, b in zip(p.ravel(), t.ravel())]
    assert r.mae == pytest.approx(sum(abs(v) for v in d) / len(d), abs=1e-6)
    assert r.rmse == pytest.approx(math.sqrt(sum(v * v for v in d) / len(d)), abs=1e-6)
    assert r.rmse >= r.mae


def test_metric_errors():
    with pytest.raises(ValueError, match="empty"):
        mae_rmse(np.zeros(0), np.zeros(0), UNIT)
    with pytest.raises(AssertionError):
        MetricReport(mae=2.0, rmse=1.0)


def test_per_pixel_map_identities(rng):
    p, t = rng.standard_normal((7, 4, 5)), rng.standard_normal((7, 4, 5))
    m = per_pixel_rmse_map(p, t, UNIT)
    assert np.mean(m**2) == pytest.approx(np.mean((p - t) ** 2), rel=1e-6)
    assert not per_pixel_rmse_map(t, t, UNIT).any()
    q = t.copy()
    q[:, 1, 2] += 1.0
    m = per_pixel_rmse_map(q, t, UNIT)
    assert m[1, 2] == pytest.approx(1.0) and np.count_nonzero(m) == 1


def test_pgm_round_trip(tmp_path, rng):
    m = rng.random((6, 9)) * 3
    vmax = write_pgm(m, tmp_path / "map.pgm")
    raw = (tmp_path / "map.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 6\n65535\n") and len(raw) == len(b"P5\n9 6\n65535\n") + 2 * 54
    back, vmax2 = read_pgm(tmp_path / "map.pgm")
    assert vmax2 == vmax == m.max()
    np.testing.assert_allclose(back, m, atol=vmax / 65535)


def test_report_csv_columns(tmp_path):
    rep = MetricReport(1.0, 2.0, 3, 10, DriftSpec(DriftKind.VOLATILITY), False)
    write_report(tmp_path / "r.csv", [report_row("x", "test", rep)])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "run_id,split,horizon,drift_kind,memory,mae,rmse,n"
    assert lines[1] == "x,test,3,volatility,off,1.000000,2.000000,10"


# ---------------------------------------------------------------- evaluation on a small model
@pytest.fixture(scope="module")
def setup():
    s = synth_generate(SynthConfig(H=8, W=8, N=300, seed=2))
    vs, ts = split_bounds(300)
    norm = Normalizer.fit(s.frames[:vs])
    f = norm.apply(s.frames).astype(np.float32)
    cfg = ModelConfig(patch_h=4, patch_w=4, channels=4, state_dim=2, n_blocks=1, seq_len=4)
    return f, norm, ts, cfg, NestS6(cfg, seed=0)


def test_rollout_h1_equals_single_step(setup):
    f, norm, ts, cfg, model = setup
    one = evaluate_one_step(model, window_arrays(f, 4, 4, 4, ts, 300), norm)
    trace = rollout_eval(model, f, f, ts, 300, norm, 4, (4, 4), horizon=6)
    assert trace.reports[0] == one.report
    assert trace.preds[0].tobytes() == one.preds.tobytes()
    assert [r.horizon for r in trace.reports] == [1, 2, 3, 4, 5, 6]
    assert trace.delta_mae == trace.reports[5].mae - trace.reports[0].mae
    assert trace.delta_rmse == trace.reports[5].rmse - trace.reports[0].rmse
    assert all(math.isfinite(r.mae) and math.isfinite(r.rmse) for r in trace.reports)


def test_rollout_never_writes_memory_after_first_step(setup):
    f, norm, ts, cfg, model = setup
    start = model.slow.write_calls
    evaluate_one_step(model, window_arrays(f, 4, 4, 4, ts, 300), norm)
    one_step_calls = model.slow.write_calls - start
    start = model.slow.write_calls
    rollout_eval(model, f, f, ts, 300, norm, 4, (4, 4), horizon=6)
    assert model.slow.write_calls - start == one_step_calls


def test_evaluation_performs_no_parameter_writes(setup):
    f, norm, ts, cfg, model = setup
    before = model.checksum()
    rollout_eval(model, f, f, ts, 300, norm, 4, (4, 4), horizon=3)
    for kind in DriftKind:
        drift_eval(model, f, DriftSpec(kind), True, ts, 300, norm, 4, (4, 4))
    assert model.checksum() == before


def test_perfect_model_has_zero_error_at_every_horizon():
    t = np.arange(40, dtype=np.float64)
    f = np.broadcast_to(t[:, None, None] * 2.0, (40, 4, 4)).copy()  # exact in binary
    trace = rollout_eval(LinearExtrapolator(), f, f, 20, 40, UNIT, 3, (2, 2), horizon=6)
    assert all(r.mae == 0 and r.rmse == 0 for r in trace.reports)


def test_persistence_errors_accumulate(setup):
    f, norm, ts, _, _ = setup
    trace = rollout_eval(PersistenceModel(), f, f, ts, 300, norm, 4, (4, 4), horizon=6)
    assert trace.delta_mae > 0 and trace.delta_rmse > 0


def test_single_window_rollout(setup):
    f, norm, ts, cfg, model = setup
    trace = rollout(model, f[ts - 4 : ts, :4, :4], f[ts : ts + 6, :4, :4], norm,
                    model.new_memory(1), np.zeros((1, 1, 4, 4), np.float32))
    assert len(trace.reports) == 6 and len(trace.preds) == 6
    with pytest.raises(ValueError, match="truth"):
        rollout(model, f[:4, :4, :4], f[:2, :4, :4], norm, horizon=6)


def test_identity_drift_reproduces_plain_metrics(setup):
    f, norm, ts, cfg, model = setup
    plain = evaluate_one_step(model, window_arrays(f, 4, 4, 4, ts, 300), norm).report
    for spec in (DriftSpec(DriftKind.SCALE_OFFSET, alpha=1.0, beta=0.0), DriftSpec(DriftKind.SPATIAL_SHIFT, k=0),
                 DriftSpec(DriftKind.VOLATILITY, sigma=0.0)):
        rep = drift_eval(model, f, spec, True, ts, 300, norm, 4, (4, 4))
        assert (rep.mae, rep.rmse, rep.n_samples) == (plain.mae, plain.rmse, plain.n_samples)


def test_memory_off_matches_memory_free_model(setup):
    f, norm, ts, cfg, model = setup
    bare_cfg = ModelConfig(**{**cfg.__dict__, "memory": False})
    bare = NestS6(bare_cfg, params={k: v for k, v in model.state_dict().items() if not k.startswith("slow.")})
    for kind in DriftKind:
        a = drift_eval(model, f, DriftSpec(kind), False, ts, 300, norm, 4, (4, 4))
        b = drift_eval(bare, f, DriftSpec(kind), True, ts, 300, norm, 4, (4, 4))
        assert (a.mae, a.rmse) == (b.mae, b.rmse)
        assert not a.memory_enabled and not b.memory_enabled


def test_spatial_shift_targets_mode(setup):
    f, norm, ts, cfg, model = setup
    spec = DriftSpec(DriftKind.SPATIAL_SHIFT, k=2)
    a = drift_eval(model, f, spec, True, ts, 300, norm, 4, (4, 4))
    b = drift_eval(model, f, spec, True, ts, 300, norm, 4, (4, 4), shifted_targets=True)
    assert a.mae != b.mae


# ---------------------------------------------------------------- MACs
def hand_ledger(memory: bool) -> dict[str, int]:
    # D=2, D_s=1, 2x2 patch (P=4), window 2, r=0, one block, T=1
    led = {"stem.conv3x3": 2 * 9 * 2 * 4}
    if memory:
        led.update({"slow.phi1": 3 * 2 * 4, "slow.phi2": 2 * 2 * 4, "slow.write": 2 * 2 * 4,
                    "slow.gate": 2 * 2 * 4, "slow.inject": 2 * 4})
    led.update({
        "block0.ln1": 4 * 2 * 4,
        "block0.dwconv3x3": 9 * 2 * 4,
        "block0.ln2": 4 * 2 * 4,
        "block0.attn.qkv": 3 * 2 * 2 * 4,
        "block0.attn.scores": 2 * (2 * 2) ** 2 * 2 // 2,  # one window: (w^2)^2 * D
        "block0.attn.mix": (2 * 2) ** 2 * 2,
        "block0.attn.out": 2 * 2 * 4,
        "block0.ln3": 4 * 2 * 4,
        "block0.params.delta": 2 * 2 * 4,
        "block0.params.b": 2 * 1 * 4,
        "block0.params.c": 2 * 1 * 4,
        "block0.scan": 5 * 2 * 1 * 4,
        "block0.skip": 2 * 4,
        "head.conv1x1": 2 * 4,
    })
    return led


@pytest.mark.parametrize("memory,total", [(False, 528), (True, 608)])
def test_mac_hand_ledger(memory, total):
    cfg = ModelConfig(patch_h=2, patch_w=2, channels=2, state_dim=1, n_blocks=1, low_rank=0, seq_len=1,
                      memory=memory)
    mc = count_macs(cfg, 2, 2)
    assert dict(mc.layers) == hand_ledger(memory)
    assert mc.total == sum(hand_ledger(memory).values()) == total


def test_pointwise_conv_closed_form():
    cfg = ModelConfig(patch_h=5, patch_w=5, channels=7, n_blocks=1)
    assert dict(count_macs(cfg, 5, 5, seq_len=1).layers)["block0.attn.out"] == 7 * 7 * 25


def test_macs_linear_in_patches_and_steps():
    cfg = ModelConfig()
    base = count_macs(cfg, 20, 20, seq_len=1).total
    assert count_macs(cfg, 40, 40, seq_len=1).total == 4 * base
    assert count_macs(cfg, 20, 20, seq_len=6).total == 6 * base
    assert count_macs(cfg, 40, 20, seq_len=3).total == 6 * base


def test_mac_ledger_file(tmp_path):
    mc = count_macs(ModelConfig(), 20, 20)
    text = write_mac_ledger(mc, tmp_path / "macs.csv")
    rows = (tmp_path / "macs.csv").read_text().splitlines()
    assert rows[0] == "layer,macs" and rows[-2] == f"total,{mc.total}"
    assert rows[-1].startswith("transcendental_ops,")
    assert str(mc.total) in text

import numpy as np
import pytest

from bevmap import synth
from bevmap.decoder import DecoderConfig
from bevmap.geometry import BevExtent
from bevmap.priors import abstract, fit_clusters
from bevmap.training import (
    PRIOR_MODE_PRIOR,
    PRIOR_MODE_RANDOM,
    TrainConfig,
    build_dataset,
    final_epoch_mean,
    load_checkpoint,
    save_checkpoint,
    setup_run,
    train,
)

EXT = BevExtent(-30, 30, -15, 15, 32, 16)


@pytest.fixture(scope="module")
def world():
    scfg = synth.SceneConfig(extent=EXT, n_points=8, divider_lanes=4, crossing_slots=2)
    scenes = [synth.generate_scene(scfg, seed=100 + i) for i in range(3)]
    dcfg = DecoderConfig(
        n_instances=8, n_prior=4, n_points=8, channels=16, n_layers=2,
        n_heads=2, ffn_dim=32, head_hidden=16, num_levels=2, num_points_attn=2,
    )
    dataset = build_dataset(scenes, channels=16, num_levels=2, seed=7)
    elements = [e for s in scenes for e in s.elements]
    bank = abstract(fit_clusters(elements, EXT, k=4, seed=3).clusters, 4)
    return scenes, dcfg, dataset, bank


def test_overfit_single_scene(world):
    scenes, dcfg, dataset, bank = world
    tcfg = TrainConfig(steps=500, lr=0.2, seed=1, prior_mode=PRIOR_MODE_PRIOR)
    params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
    result = train(params, eff_bank, dataset[:1], eff_cfg, tcfg)
    first = result.log[0]["loss_total"]
    last = result.log[-1]["loss_total"]
    assert last < 0.10 * first, f"loss {first:.3f} -> {last:.3f}"


def test_divergence_aborts_with_step_index(world):
    import warnings

    from bevmap.training import TrainingDiverged

    scenes, dcfg, dataset, bank = world
    tcfg = TrainConfig(steps=200, lr=500.0, optimizer="sgd", seed=1, prior_mode=PRIOR_MODE_PRIOR)
    params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises((TrainingDiverged, Exception)) as exc:
            train(params, eff_bank, dataset[:1], eff_cfg, tcfg)
    assert "step" in str(exc.value) or "stage" in str(exc.value)


def test_training_deterministic(world):
    scenes, dcfg, dataset, bank = world
    logs = []
    for _ in range(2):
        tcfg = TrainConfig(steps=8, lr=0.1, seed=5, prior_mode=PRIOR_MODE_PRIOR)
        params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
        result = train(params, eff_bank, dataset, eff_cfg, tcfg)
        logs.append(result.log)
    assert logs[0] == logs[1]


def test_modes_differ_only_through_reference_path(world):
    scenes, dcfg, dataset, bank = world
    tcfg_p = TrainConfig(steps=1, lr=0.1, seed=5, prior_mode=PRIOR_MODE_PRIOR)
    tcfg_r = TrainConfig(steps=1, lr=0.1, seed=5, prior_mode=PRIOR_MODE_RANDOM)
    params_p, bank_p, cfg_p = setup_run(dcfg, bank, tcfg_p)
    params_r, bank_r, cfg_r = setup_run(dcfg, bank, tcfg_r)
    assert bank_p is bank and bank_r is None
    assert cfg_p.n_prior == 4 and cfg_r.n_prior == 0
    # every non-reference parameter is identical between the two modes
    for name in params_p:
        if name == "ref_logits":
            continue
        assert np.array_equal(params_p[name].values, params_r[name].values), name
    # the shared learnable tail rows are drawn identically
    assert np.array_equal(params_p["ref_logits"].values, params_r["ref_logits"].values[cfg_p.n_prior:])


def test_log_columns(world):
    scenes, dcfg, dataset, bank = world
    tcfg = TrainConfig(steps=3, lr=0.1, seed=2, prior_mode=PRIOR_MODE_PRIOR)
    params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
    result = train(params, eff_bank, dataset, eff_cfg, tcfg)
    expected = {"step", "loss_total", "loss_cls", "loss_pts", "loss_disc", "u_layer1", "u_t"}
    assert set(result.log[0]) == expected
    assert [row["step"] for row in result.log] == [0, 1, 2]
    assert all(0.0 <= row["u_t"] <= 1.0 for row in result.log)


def test_final_epoch_mean(world):
    log = [{"u_t": float(i)} for i in range(10)]
    assert final_epoch_mean(log, "u_t", 4) == pytest.approx(7.5)


def test_checkpoint_round_trip(tmp_path, world):
    scenes, dcfg, dataset, bank = world
    tcfg = TrainConfig(steps=2, lr=0.1, seed=9, prior_mode=PRIOR_MODE_PRIOR)
    params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
    result = train(params, eff_bank, dataset, eff_cfg, tcfg)
    path = str(tmp_path / "ckpt.npz")
    save_checkpoint(result.params, path)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(result.params)
    for name in loaded:
        assert np.array_equal(loaded[name].values, result.params[name].values)


def test_empty_dataset_rejected(world):
    scenes, dcfg, dataset, bank = world
    tcfg = TrainConfig(steps=1, lr=0.1, seed=0)
    params, eff_bank, eff_cfg = setup_run(dcfg, bank, tcfg)
    with pytest.raises(ValueError, match="empty"):
        train(params, eff_bank, [], eff_cfg, tcfg)

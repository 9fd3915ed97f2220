import dataclasses

import numpy as np
import pytest

from roomdiff.denoiser import (ConditionSpec, DenoiserConfig, backward,
                               backward_params, build_manifest, forward,
                               forward_params, init_model, load_model,
                               param_views, save_model)
from roomdiff.errors import CheckpointError, ConfigError

SMALL = DenoiserConfig(num_slots=4, num_classes=5, code_dim=3, width=16,
                       depth=2, heads=2, time_dim=8)
TEXT = dataclasses.replace(SMALL, text_dim=6, vocab_size=11, max_tokens=10)


def randomized(cfg, seed=0, scale=0.1):
    """Model with non-zero heads so gradients reach every parameter."""
    m = init_model(cfg, np.random.default_rng(seed))
    extra = np.random.default_rng(seed + 1)
    views = m.views()
    for name in views:
        if name.startswith("head"):
            views[name][...] += extra.standard_normal(
                views[name].shape).astype(np.float32) * scale
    return m


def test_zero_init_heads_give_zero_output():
    m = init_model(SMALL, np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((4, SMALL.row_dim))
    assert np.array_equal(forward(m, x, 17), np.zeros_like(x))


def test_same_seed_same_params():
    a = init_model(SMALL, np.random.default_rng(5))
    b = init_model(SMALL, np.random.default_rng(5))
    assert np.array_equal(a.params, b.params)
    c = init_model(SMALL, np.random.default_rng(6))
    assert not np.array_equal(a.params, c.params)


def test_param_count_matches_hand_formula():
    # N=8, D=20 -> L=8, F=4 with width 64, depth 2, heads 4, time 128
    cfg = DenoiserConfig(num_slots=8, num_classes=8, code_dim=4, width=64,
                         depth=2, heads=4, time_dim=128)
    w, hw, td = 64, 32, 128
    expected = (
        (8 * hw + hw) + (8 * hw + hw) + (4 * hw + hw)   # encoders
        + (3 * hw * w + w)                              # input projection
        + (td * td + td) + (td * w + w)                 # time MLP
        + 2 * (                                         # per block
            (w * w + w)                                 # time projection
            + (3 * w * w + w)                           # conv k=3
            + 2 * w                                     # ln1
            + (w * 3 * w + 3 * w) + (w * w + w)         # self-attention
        )
        + 2 * w                                         # out_ln
        + (w * 8 + 8) + (w * 8 + 8) + (w * 4 + 4)       # heads
    )
    model = init_model(cfg, np.random.default_rng(0))
    manifest, total = build_manifest(cfg)
    assert total == expected
    assert model.param_count == expected
    assert sum(int(np.prod(s)) for _, s, _ in manifest) == expected


def test_manifest_tiles_flat_array():
    manifest, total = build_manifest(TEXT)
    offsets = [o for _, _, o in manifest]
    sizes = [int(np.prod(s)) for _, s, _ in manifest]
    assert offsets[0] == 0
    for i in range(1, len(manifest)):
        assert offsets[i] == offsets[i - 1] + sizes[i - 1]
    assert offsets[-1] + sizes[-1] == total
    flat = np.arange(total, dtype=np.float32)
    views = param_views(flat, manifest)
    flat[5] = -99.0
    name, shape, off = manifest[0]
    assert views[name].ravel()[5] == -99.0  # views share memory


def test_forward_batched_matches_single():
    m = randomized(SMALL)
    rng = np.random.default_rng(7)
    xs = rng.standard_normal((3, 4, SMALL.row_dim)).astype(np.float32)
    batched = forward(m, xs, np.array([4, 9, 250]))
    for i, t in enumerate((4, 9, 250)):
        single = forward(m, xs[i], t)
        assert np.allclose(batched[i], single, atol=1e-6)


def test_permutation_equivariance_kernel_one():
    cfg = dataclasses.replace(SMALL, kernel=1)
    m = randomized(cfg)
    params = {k: v.astype(np.float64) for k, v in m.views().items()}
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, cfg.row_dim))
    perm = rng.permutation(4)
    out = forward_params(params, cfg, x, 11)
    out_perm = forward_params(params, cfg, x[perm], 11)
    assert np.max(np.abs(out[perm] - out_perm)) < 1e-12


def test_kernel_three_breaks_equivariance():
    m = randomized(SMALL)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, SMALL.row_dim)).astype(np.float32)
    perm = np.array([1, 0, 3, 2])
    out = forward(m, x, 11)
    out_perm = forward(m, x[perm], 11)
    assert not np.allclose(out[perm], out_perm, atol=1e-4)


def _fd_audit(cfg, cond, seed, coords=200, check_input=True):
    rng = np.random.default_rng(seed)
    m = randomized(cfg, seed=seed)
    params = {k: v.astype(np.float64) for k, v in m.views().items()}
    x = rng.standard_normal((2, cfg.num_slots, cfg.row_dim))
    t = np.array([3, 777])
    probe = rng.standard_normal(x.shape)

    def scalar():
        return float((forward_params(params, cfg, x, t, cond) * probe).sum())

    _, cache = forward_params(params, cfg, x, t, cond, want_cache=True)
    grads, gx = backward_params(cache, probe)
    h, worst = 1e-5, 0.0
    names = sorted(params)
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        fp = scalar()
        arr[idx] = orig - h
        fm = scalar()
        arr[idx] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = float(grads[name][idx]) if name in grads else 0.0
        worst = max(worst, abs(analytic - numeric)
                    / max(abs(analytic), abs(numeric), 1e-6))
    if check_input:
        for _ in range(50):
            idx = tuple(int(rng.integers(s)) for s in x.shape)
            orig = x[idx]
            x[idx] = orig + h
            fp = scalar()
            x[idx] = orig - h
            fm = scalar()
            x[idx] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(gx[idx] - numeric)
                        / max(abs(gx[idx]), abs(numeric), 1e-6))
    return worst


def test_full_model_gradients_fd():
    assert _fd_audit(SMALL, None, seed=10) < 1e-4


def test_full_model_gradients_fd_text_mode():
    cond = ConditionSpec(mode="text",
                         tokens=np.array([[1, 4, 2, 0], [3, 9, 10, 5]]))
    assert _fd_audit(TEXT, cond, seed=11) < 1e-4


def test_zero_output_grad_gives_zero_grads():
    m = randomized(SMALL)
    x = np.random.default_rng(12).standard_normal((4, SMALL.row_dim))
    flat, gx = backward(m, x, 5, None, np.zeros_like(x))
    assert np.array_equal(flat, np.zeros_like(flat))
    assert np.array_equal(gx, np.zeros_like(gx))


def test_masked_entry_gradient_flows_through_attention():
    # freeze row 0 (conditioning): its input still influences row 1's output
    # through attention, so dL/dx[0] is nonzero for a loss on row 1 only
    cfg = dataclasses.replace(SMALL, num_slots=2)
    m = randomized(cfg, seed=13)
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, cfg.row_dim))
    gout = np.zeros_like(x)
    gout[1] = rng.standard_normal(cfg.row_dim)
    _, gx = backward(m, x, 9, None, gout, dtype=np.float64)
    assert np.abs(gx[0]).max() > 1e-9
    # and the analytic value matches finite differences
    params = {k: v.astype(np.float64) for k, v in m.views().items()}
    h = 1e-5
    idx = (0, 3)
    orig = x[idx]
    x_p = x.copy()
    x_p[idx] = orig + h
    x_m = x.copy()
    x_m[idx] = orig - h
    fp = float((forward_params(params, cfg, x_p, 9) * gout).sum())
    fm = float((forward_params(params, cfg, x_m, 9) * gout).sum())
    numeric = (fp - fm) / (2 * h)
    assert abs(gx[idx] - numeric) / max(abs(numeric), 1e-6) < 1e-4


def test_tokens_rejected_without_text_support():
    m = randomized(SMALL)
    x = np.zeros((4, SMALL.row_dim))
    cond = ConditionSpec(mode="text", tokens=np.array([1, 2]))
    with pytest.raises(ConfigError):
        forward(m, x, 3, cond)


def test_forward_is_pure():
    m = randomized(TEXT, seed=15)
    x = np.random.default_rng(16).standard_normal((4, TEXT.row_dim))
    cond = ConditionSpec(mode="text", tokens=np.array([1, 2, 3]))
    a = forward(m, x, 40, cond)
    b = forward(m, x, 40, cond)
    assert np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    m = randomized(TEXT, seed=17)
    path = tmp_path / "model.ckpt"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.config == m.config
    assert np.array_equal(loaded.params, m.params)
    x = np.random.default_rng(18).standard_normal((4, TEXT.row_dim))
    assert np.array_equal(forward(m, x, 3), forward(loaded, x, 3))


def test_checkpoint_truncated_payload(tmp_path):
    m = randomized(SMALL, seed=19)
    path = tmp_path / "model.ckpt"
    save_model(m, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(path)


def test_checkpoint_manifest_hash_mismatch(tmp_path):
    import json
    m = randomized(SMALL, seed=20)
    path = tmp_path / "model.ckpt"
    save_model(m, path)
    blob = path.read_bytes()
    header, payload = blob.split(b"\n", 1)
    doc = json.loads(header)
    doc["manifest_sha256"] = "0" * 64
    path.write_bytes(json.dumps(doc, sort_keys=True).encode() + b"\n" + payload)
    with pytest.raises(CheckpointError, match="hash"):
        load_model(path)


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(CheckpointError):
        load_model(path)

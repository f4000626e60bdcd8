import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshfield.nn import (
    AdamState,
    Mlp,
    SineCosineEncoding,
    Tape,
    TapeError,
    adam_step,
    encode,
    load_checkpoint,
    mlp_forward,
    mlp_parameter_count,
    save_checkpoint,
)


def fd_check(net, x, n_params=20, seed=0, h=1e-5):
    """Compare reverse-mode gradients of a random projection with central differences."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        proj = torch.randn(net(x).shape, generator=gen)
    net.zero_grad()
    tape = Tape()
    mlp_forward(net, x, tape)
    tape.backward(proj)
    flat = [(p, i) for p in net.parameters() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in rng.choice(len(flat), size=n_params, replace=False):
        p, i = flat[k]
        with torch.no_grad():
            old = p.view(-1)[i].item()
            p.view(-1)[i] = old + h
            up = (net(x) * proj).sum().item()
            p.view(-1)[i] = old - h
            down = (net(x) * proj).sum().item()
            p.view(-1)[i] = old
        fd = (up - down) / (2 * h)
        an = p.grad.view(-1)[i].item()
        worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-6))
    return worst


# the four shapes used by the scene fields, at reduced width
SHAPES = {
    "background": dict(d_in=39, d_out=9, d_hidden=16, n_layers=8, skip=(4,), init="geometric", inside_out=True, radius=0.9),
    "residual": dict(d_in=21, d_out=1, d_hidden=24, n_layers=8, skip=(4,), init="xavier"),
    "object_feature": dict(d_in=21, d_out=8, d_hidden=16, n_layers=4, init="xavier"),
    "decoder": dict(d_in=8 + 27 + 1, d_out=3, d_hidden=16, n_layers=4, activation="relu", output_activation="sigmoid"),
}


class TestMlp:
    @pytest.mark.parametrize("name", SHAPES)
    def test_gradient_check(self, name):
        net = Mlp(**SHAPES[name], seed=3)
        x = torch.rand(5, SHAPES[name]["d_in"], generator=torch.Generator().manual_seed(1)) * 2 - 1
        assert fd_check(net, x) < 1e-4

    def test_half_squared_norm_loss(self):
        net = Mlp(3, 4, d_hidden=8, n_layers=2, seed=0)
        x = torch.tensor([[0.1, -0.2, 0.3]])
        tape = Tape()
        out = mlp_forward(net, x, tape)
        (gx,) = tape.backward(out.detach())  # d(|y|^2/2)/dy = y
        with torch.no_grad():
            for j in range(3):
                e = torch.zeros(1, 3)
                e[0, j] = 1e-5
                fd = (0.5 * (net(x + e) ** 2).sum() - 0.5 * (net(x - e) ** 2).sum()) / 2e-5
                assert gx[0, j].item() == pytest.approx(fd.item(), rel=1e-4, abs=1e-9)

    @pytest.mark.parametrize("name", SHAPES)
    def test_parameter_count_closed_form(self, name):
        cfg = SHAPES[name]
        net = Mlp(**cfg)
        assert net.n_parameters() == mlp_parameter_count(
            cfg["d_in"], cfg["d_out"], cfg["d_hidden"], cfg["n_layers"], cfg.get("skip", ())
        )

    def test_full_scale_count(self):
        # 8 hidden layers of 256 with one re-concatenated input at layer 4
        assert mlp_parameter_count(39, 257, 256, 8, (4,)) == (
            39 * 256 + 256 + 3 * (256 * 256 + 256) + (256 + 39) * 256 + 256 + 3 * (256 * 256 + 256) + 256 * 257 + 257
        )

    @pytest.mark.parametrize("name", SHAPES)
    def test_init_magnitude(self, name):
        net = Mlp(**SHAPES[name])
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(200, SHAPES[name]["d_in"], generator=gen)
        x = x / x.norm(dim=1, keepdim=True) * torch.rand(200, 1, generator=gen)
        m = mlp_forward(net, x).abs().mean().item()
        assert 1e-4 < m < 10

    def test_zero_final_layer(self):
        net = Mlp(5, 2, d_hidden=8, n_layers=3, init="zero_last")
        with torch.no_grad():
            net.layers[-1].bias.copy_(torch.tensor([0.25, -1.5]))
        out = mlp_forward(net, torch.randn(7, 5))
        assert torch.all(out == torch.tensor([0.25, -1.5]))

    def test_identity(self):
        net = Mlp(4, 4, d_hidden=4, n_layers=0, init="identity", activation="none")
        x = torch.randn(3, 4)
        assert torch.equal(mlp_forward(net, x), x)

    def test_deterministic(self):
        x = torch.linspace(-1, 1, 39).reshape(1, 39)
        a = mlp_forward(Mlp(**SHAPES["background"], seed=9), x)
        b = mlp_forward(Mlp(**SHAPES["background"], seed=9), x)
        assert a.numpy().tobytes() == b.numpy().tobytes()

    def test_geometric_init_is_sphere(self):
        # a rough sphere: negative inside, positive outside, increasing with radius
        net = Mlp(3, 1, d_hidden=256, n_layers=8, skip=(4,), init="geometric", radius=0.5)
        dirs = torch.randn(200, 3, generator=torch.Generator().manual_seed(0))
        dirs = dirs / dirs.norm(dim=1, keepdim=True)
        means = [mlp_forward(net, dirs * r).mean().item() for r in (0.0, 0.3, 0.8)]
        assert means[0] < means[1] < 0 < means[2]

    def test_inside_out_sign(self):
        net = Mlp(3, 1, d_hidden=64, n_layers=4, init="geometric", radius=0.9, inside_out=True)
        assert mlp_forward(net, torch.zeros(1, 3)).item() > 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            mlp_forward(Mlp(3, 1, d_hidden=4, n_layers=1), torch.zeros(2, 4))


class TestTape:
    def test_reuse_rejected(self):
        net = Mlp(3, 1, d_hidden=4, n_layers=1)
        tape = Tape()
        mlp_forward(net, torch.zeros(1, 3), tape)
        tape.backward()
        with pytest.raises(TapeError):
            tape.backward()
        with pytest.raises(TapeError):
            mlp_forward(net, torch.zeros(1, 3), tape)

    def test_zero_output_gradient(self):
        net = Mlp(3, 2, d_hidden=4, n_layers=2)
        tape = Tape()
        mlp_forward(net, torch.ones(4, 3), tape)
        tape.backward(torch.zeros(4, 2))
        assert all(torch.all(p.grad == 0) for p in net.parameters())

    def test_accumulation_is_linear(self):
        net = Mlp(3, 2, d_hidden=6, n_layers=2, seed=1)
        xa, xb = torch.randn(4, 3), torch.randn(4, 3)
        grads = []
        for xs in ([xa], [xb], [xa, xb]):
            net.zero_grad()
            for x in xs:
                tape = Tape()
                mlp_forward(net, x, tape)
                tape.backward()
            grads.append([p.grad.clone() for p in net.parameters()])
        for ga, gb, gab in zip(*grads):
            assert torch.allclose(ga + gb, gab, atol=1e-12, rtol=0)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": torch.tensor([1.0, -2.0])}
        st_ = AdamState()
        adam_step(st_, p, {"w": torch.zeros(2)})
        assert torch.equal(p["w"], torch.tensor([1.0, -2.0]))

    def test_first_step_is_signed_lr(self):
        p = {"w": torch.tensor([1.0, 1.0, 1.0])}
        g = torch.tensor([3.0, -0.5, 100.0])
        adam_step(AdamState(lr=0.01), p, {"w": g})
        np.testing.assert_allclose(p["w"].numpy(), 1 - 0.01 * np.sign(g.numpy()), rtol=0, atol=1e-8)

    def test_quadratic_bowl(self):
        x = {"x": torch.tensor([1.0])}
        st_ = AdamState(lr=0.1)
        for _ in range(500):
            adam_step(st_, x, {"x": 2 * x["x"]})
        assert abs(x["x"].item()) < 1e-3

    def test_step_count_and_shapes(self):
        p = {"a": torch.zeros(3, 2), "b": torch.zeros(4)}
        st_ = AdamState()
        for i in range(3):
            adam_step(st_, p, {k: torch.ones_like(v) for k, v in p.items()})
            assert st_.step == i + 1
        assert all(st_.m[k].shape == p[k].shape == st_.v[k].shape for k in p)

    def test_non_finite_skipped(self, caplog):
        p = {"w": torch.tensor([1.0])}
        st_ = AdamState()
        assert not adam_step(st_, p, {"w": torch.tensor([math.nan])})
        assert st_.step == 0 and p["w"].item() == 1.0
        assert "non-finite" in caplog.text

    def test_regression_descends(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(64, 3, generator=gen)
        y = torch.sin(3 * x).sum(dim=1, keepdim=True)
        net = Mlp(3, 1, d_hidden=16, n_layers=2)
        params = dict(net.named_parameters())

        def loss():
            return ((net(x) - y) ** 2).mean()

        start = loss().item()
        st_ = AdamState(lr=1e-2)
        for _ in range(200):
            net.zero_grad()
            loss().backward()
            adam_step(st_, params)
        assert loss().item() < start


class TestEncoding:
    def test_zero(self):
        enc = SineCosineEncoding(2)
        out = encode(enc, [0.0]).numpy()
        assert out.tolist() == [0, 0, 1, 0, 1]

    def test_dim(self):
        enc = SineCosineEncoding(6)
        assert enc.out_dim(3) == 39
        assert encode(enc, np.zeros(3)).shape == (39,)

    def test_periodicity(self):
        enc = SineCosineEncoding(1, include_input=False)
        x = torch.tensor([0.3])
        torch.testing.assert_close(enc(x), enc(x + 2), atol=1e-12, rtol=0)

    def test_layout(self):
        enc = SineCosineEncoding(2)
        x = torch.tensor([0.2, -0.7])
        out = enc(x)
        assert torch.equal(out[:2], x)
        torch.testing.assert_close(out[6:8], torch.sin(2 * math.pi * x))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=4), st.integers(0, 8))
    def test_bounded(self, xs, octaves):
        out = encode(SineCosineEncoding(octaves), xs)
        assert out.shape[-1] == len(xs) * (2 * octaves + 1)
        assert torch.all(out.abs() <= 1)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp(3, 2, d_hidden=5, n_layers=2, skip=(1,))
    params = {f"net.{k}": v for k, v in net.named_parameters()}
    st_ = AdamState(lr=1e-3)
    for p in params.values():
        p.grad = torch.ones_like(p)
    adam_step(st_, params)
    st_.lr_scale = {"net.layers.0.bias": 0.5}
    save_checkpoint(tmp_path / "c.ckpt", params, {"iteration": 1, "profile": "tiny"}, st_)
    tensors, meta, adam = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"iteration": 1, "profile": "tiny"}
    for k, v in params.items():
        assert tensors[k].tobytes() == v.detach().numpy().tobytes()
    assert adam.step == 1 and adam.lr == 1e-3 and adam.lr_scale == st_.lr_scale
    for k in params:
        assert torch.equal(adam.m[k], st_.m[k]) and torch.equal(adam.v[k], st_.v[k])


def test_checkpoint_keeps_shapes(tmp_path):
    arrays = {"scalar": np.array(2.5), "row": np.arange(3.0), "grid": np.ones((2, 0, 4))}
    save_checkpoint(tmp_path / "s.ckpt", arrays, {})
    tensors, _, _ = load_checkpoint(tmp_path / "s.ckpt")
    for k, v in arrays.items():
        assert tensors[k].shape == v.shape and np.array_equal(tensors[k], v)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage-garbage")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x")

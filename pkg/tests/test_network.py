import numpy as np
import pytest

from pertpinn.network import (
    ACTIVATIONS,
    BodyParams,
    Jet,
    MultiHeadCheckpoint,
    adam_init,
    adam_step,
    apply_operator,
    forward_jet,
    init_body,
    load_checkpoint,
    param_gradient,
    save_checkpoint,
)
from pertpinn.presets import get_preset
from pertpinn.problem import LinearOperator, SpaceTimeDomain
from pertpinn.training import CollocationBatch, LossWeights, multihead_loss, sample_collocation, task_family


def random_body(rng, depth=None, width=None, act="tanh"):
    depth = depth or int(rng.integers(1, 4))
    width = width or int(rng.integers(2, 9))
    body = init_body((2,) + (width,) * depth, act, int(rng.integers(1 << 30)), SpaceTimeDomain())
    # larger weights than the default init so curvature is not negligible
    return body.with_flat(body.flat * rng.uniform(1.0, 2.5))


def values(body, x, t):
    return forward_jet(body, x, t).v


class TestJets:
    def test_identity_linear_layer(self):
        body = BodyParams((2, 2), np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), "linear")
        H = forward_jet(body, 0.3, 0.7)
        got = [float(getattr(H, c)[0, 0]) for c in ("v", "dx", "dt", "dxx", "dtt")]
        assert got == [0.3, 1.0, 0.0, 0.0, 0.0]

    def test_tanh_at_zero(self):
        # W = [[1, 0]], b = 0 so the pre-activation is x
        body = BodyParams((2, 1), np.array([1.0, 0.0, 0.0]), "tanh")
        H = forward_jet(body, 0.0, 0.4)
        assert H.v[0, 0] == 0.0 and H.dx[0, 0] == 1.0 and H.dxx[0, 0] == 0.0

    def test_first_derivatives_fd(self):
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(100):
            body = random_body(rng)
            x, t = rng.uniform(0, 2, 8), rng.uniform(0, 1, 8)
            H = forward_jet(body, x, t)
            fdx = (values(body, x + h, t) - values(body, x - h, t)) / (2 * h)
            fdt = (values(body, x, t + h) - values(body, x, t - h)) / (2 * h)
            for got, want in ((H.dx, fdx), (H.dt, fdt)):
                np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5 * np.abs(want).max())

    def test_second_derivatives_fd(self):
        rng = np.random.default_rng(1)
        h = 1e-3
        for _ in range(100):
            body = random_body(rng)
            x, t = rng.uniform(0, 2, 8), rng.uniform(0, 1, 8)
            H = forward_jet(body, x, t)
            v = values(body, x, t)
            fdxx = (values(body, x + h, t) - 2 * v + values(body, x - h, t)) / h**2
            fdtt = (values(body, x, t + h) - 2 * v + values(body, x, t - h)) / h**2
            for got, want in ((H.dxx, fdxx), (H.dtt, fdtt)):
                np.testing.assert_allclose(got, want, rtol=1e-3, atol=1e-3 * np.abs(want).max())

    def test_deterministic(self):
        body = random_body(np.random.default_rng(2), 3, 8)
        x = np.linspace(0, 2, 33)
        a, b = forward_jet(body, x, 0.5 * x), forward_jet(body, x, 0.5 * x)
        for c in ("v", "dx", "dt", "dxx", "dtt"):
            assert np.array_equal(getattr(a, c), getattr(b, c))

    def test_nonfinite_reports_layer(self):
        body = init_body((2, 4, 4), "tanh", 0)
        with pytest.raises(FloatingPointError, match="layer 0"):
            forward_jet(body, np.array([np.nan]), np.array([0.0]))

    @pytest.mark.parametrize("name", ["tanh", "sin"])
    def test_activation_second_derivative_continuous(self, name):
        z = np.random.default_rng(3).uniform(-4, 4, 1000)
        _, d1, d2, d3 = ACTIVATIONS[name](z)
        h = 1e-6
        _, _, d2p, _ = ACTIVATIONS[name](z + h)
        # sigma'' has a bounded derivative (sigma''') so it is continuous
        assert np.max(np.abs(d2p - d2)) < 1e-5
        np.testing.assert_allclose((ACTIVATIONS[name](z + h)[1] - ACTIVATIONS[name](z - h)[1]) / (2 * h), d2,
                                   atol=1e-7)
        np.testing.assert_allclose((ACTIVATIONS[name](z + h)[2] - ACTIVATIONS[name](z - h)[2]) / (2 * h), d3,
                                   atol=1e-7)


class TestOperator:
    def _jet(self):
        rng = np.random.default_rng(0)
        return Jet(*(rng.normal(size=(4, 3)) for _ in range(5)))

    def test_heat(self):
        J = self._jet()
        np.testing.assert_allclose(apply_operator(LinearOperator.heat(0.1), J), J.dt - 0.1 * J.dxx)

    def test_wave(self):
        J = self._jet()
        np.testing.assert_allclose(apply_operator(LinearOperator.wave(2.0), J), J.dtt - 4.0 * J.dxx)

    def test_zero_coefficients(self):
        J = self._jet()
        op = LinearOperator(((0, 1, 0.0), (2, 0, 0.0), (0, 0, 1e-300)))
        assert np.all(np.abs(apply_operator(op, J)) < 1e-299)

    def test_unsupported_derivative(self):
        J = self._jet()
        with pytest.raises(ValueError):
            J.select(1, 1)


def _fd_grad(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


class TestGradients:
    def test_zero_loss(self):
        body = init_body((2, 5, 5), "tanh", 0)
        _, g = param_gradient(body, [0.1, 0.2], [0.3, 0.4], lambda H: (0.0, Jet.zeros_like(H)))
        assert np.all(g == 0)

    def test_linear_net_closed_form(self):
        rng = np.random.default_rng(0)
        body = BodyParams((2, 1), rng.normal(size=3), "linear")
        x0, t0 = 0.4, 0.9

        def loss(H):
            g = Jet.zeros_like(H)
            g.v = 2 * H.v
            return float((H.v ** 2).sum()), g

        _, g = param_gradient(body, x0, t0, loss)
        u = body.flat[0] * x0 + body.flat[1] * t0 + body.flat[2]
        np.testing.assert_allclose(g, 2 * u * np.array([x0, t0, 1.0]), rtol=1e-14)

    def test_residual_loss_fd(self):
        rng = np.random.default_rng(4)
        body = random_body(rng, 3, 6)
        op = LinearOperator.heat(0.3)
        x, t = rng.uniform(0, 2, 12), rng.uniform(0, 1, 12)
        w = rng.normal(size=6)
        f = np.sin(x) * t

        def loss(H):
            r = apply_operator(op, H) @ w - f
            g = Jet.zeros_like(H)
            g.dt = np.outer(2 * r, w)
            g.dxx = np.outer(-0.3 * 2 * r, w)
            return float(r @ r), g

        _, g = param_gradient(body, x, t, loss)
        fd = _fd_grad(lambda th: param_gradient(body.with_flat(th), x, t, loss)[0], body.flat)
        mask = np.abs(fd) > 1e-6
        np.testing.assert_allclose(g[mask], fd[mask], rtol=1e-4)

    def test_full_multihead_loss_fd(self):
        problem = get_preset("kpp-4")
        tasks = task_family(problem, 3, seed=5)
        body = init_body((2, 8, 8), "tanh", 1, problem.domain)
        rng = np.random.default_rng(0)
        heads = rng.normal(size=(8, 3))
        batch = sample_collocation(problem.domain, (16, 6, 6), rng)
        weights = LossWeights(1.0, 2.0, 0.5)

        def total(th):
            b = body.with_flat(th[:body.flat.size])
            h = th[body.flat.size:].reshape(heads.shape)
            return multihead_loss(b, h, tasks, batch, weights, problem.operator)[0]

        _, _, gb, gh = multihead_loss(body, heads, tasks, batch, weights, problem.operator)
        theta = np.concatenate([body.flat, heads.ravel()])
        g = np.concatenate([gb, gh.ravel()])
        fd = _fd_grad(total, theta)
        mask = np.abs(fd) > 1e-6
        assert mask.sum() > 0.9 * theta.size
        np.testing.assert_allclose(g[mask], fd[mask], rtol=1e-4)


class TestAdam:
    def test_zero_gradient(self):
        s = adam_init(4)
        p = np.arange(4.0)
        new, s2 = adam_step(s, p, np.zeros(4))
        assert np.array_equal(new, p) and s2.step == 1

    def test_step_decay_boundary(self):
        s = adam_init(1)
        p = np.zeros(1)
        for _ in range(999):
            p, s = adam_step(s, p, np.ones(1))
        assert s.lr == 1e-4
        p, s = adam_step(s, p, np.ones(1))
        assert s.step == 1000 and s.lr == pytest.approx(1e-4 * 0.975, rel=1e-15)

    def test_constant_gradient_direction(self):
        g = np.array([3.0, -0.2, 1e-3])
        s = adam_init(3, lr=1e-2)
        p = np.zeros(3)
        for _ in range(500):
            prev = p
            p, s = adam_step(s, p, g)
        np.testing.assert_allclose((p - prev) / s.lr, -np.sign(g), rtol=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(adam_init(3), np.zeros(2), np.zeros(2))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        body = init_body((2, 5, 4), "tanh", 7, SpaceTimeDomain(0, 2, 1))
        ck = MultiHeadCheckpoint(body, np.random.default_rng(0).normal(size=(4, 3)), LinearOperator.heat(0.1),
                                 SpaceTimeDomain(0, 2, 1), seed=7, step=12, meta={"a": 1})
        path = tmp_path / "ck.json"
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert np.array_equal(back.body.flat, body.flat) and np.array_equal(back.heads, ck.heads)
        assert back.operator == ck.operator and back.step == 12 and back.digest() == ck.digest()
        save_checkpoint(back, tmp_path / "ck2.json")
        assert (tmp_path / "ck2.json").read_bytes() == path.read_bytes()

    def test_version_required(self):
        body = init_body((2, 3), "tanh", 0)
        d = MultiHeadCheckpoint(body, np.zeros((3, 1)), LinearOperator.heat(0.1), SpaceTimeDomain()).to_dict()
        d["version"] = 99
        with pytest.raises(ValueError):
            MultiHeadCheckpoint.from_dict(d)

    def test_params_little_endian_f8(self):
        import base64
        body = init_body((2, 3), "tanh", 0)
        d = MultiHeadCheckpoint(body, np.zeros((3, 1)), LinearOperator.heat(0.1), SpaceTimeDomain()).to_dict()
        raw = base64.b64decode(d["params"])
        assert np.array_equal(np.frombuffer(raw, "<f8"), body.flat)

    def test_bad_widths(self):
        with pytest.raises(ValueError):
            BodyParams((3, 4), np.zeros(16))
        with pytest.raises(ValueError):
            BodyParams((2, 4), np.zeros(5))

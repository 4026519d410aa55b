import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from defront.errors import CheckpointIOFailure, ShapeMismatch, UnknownTap
from defront.nets import (
    SCALES,
    DefrontModel,
    Discriminator,
    FlowNet,
    Generator,
    HookTapNet,
    NetConfig,
    ResNetBackbone,
    SmallIdentityNet,
    SmallVGG,
    count_parameters,
    discriminator_forward,
    extract_embedding,
    feature_net_taps,
    flow_forward,
    generator_forward,
    load_checkpoint,
    restore,
    save_checkpoint,
    warp,
)


def bilinear_oracle(x, flow):
    """Scalar double-loop sampler with edge clamping."""
    x = x.numpy()
    flow = flow.numpy()
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                sx = min(max(j + flow[b, 0, i, j], 0.0), w - 1.0)
                sy = min(max(i + flow[b, 1, i, j], 0.0), h - 1.0)
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
                ax, ay = sx - x0, sy - y0
                out[b, :, i, j] = (
                    x[b, :, y0, x0] * (1 - ax) * (1 - ay)
                    + x[b, :, y0, x1] * ax * (1 - ay)
                    + x[b, :, y1, x0] * (1 - ax) * ay
                    + x[b, :, y1, x1] * ax * ay
                )
    return out


class TestWarp:
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 12), st.integers(2, 12))
    def test_zero_flow_is_identity(self, n, c, h, w):
        x = torch.randn(n, c, h, w, dtype=torch.float64)
        assert torch.equal(warp(x, torch.zeros(n, 2, h, w, dtype=torch.float64)), x)

    def test_constant_shift(self):
        x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        flow = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
        flow[:, 0] = 1.0
        out = warp(x, flow)
        torch.testing.assert_close(out[..., :-1], x[..., 1:], rtol=0, atol=1e-12)

    def test_random_flow_matches_oracle(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            x = torch.randn(2, 2, 7, 9, generator=g, dtype=torch.float64)
            flow = 3 * torch.randn(2, 2, 7, 9, generator=g, dtype=torch.float64)
            np.testing.assert_allclose(warp(x, flow).numpy(), bilinear_oracle(x, flow), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            warp(torch.zeros(1, 3, 8, 8), torch.zeros(1, 2, 4, 4))
        with pytest.raises(ShapeMismatch):
            warp(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8))

    def test_differentiable_in_both_inputs(self):
        x = torch.randn(1, 2, 6, 6, dtype=torch.float64, requires_grad=True)
        flow = (0.7 * torch.randn(1, 2, 6, 6, dtype=torch.float64)).requires_grad_()
        assert torch.autograd.gradcheck(warp, (x, flow), eps=1e-6, atol=1e-5)


@pytest.fixture(scope="module")
def half():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 112, 112) * 2 - 1
    x[..., 56:] = -1
    return x


class TestFlowNet:
    def test_shapes(self, half):
        flows = flow_forward(FlowNet(3, 4), half)
        assert {s: tuple(f.shape) for s, f in flows.items()} == {s: (2, 2, s, s) for s in SCALES}

    def test_eval_determinism(self, half):
        net = FlowNet(3, 4).eval()
        with torch.no_grad():
            for p in net.heads.parameters():
                p.normal_()
            a, b = net(half), net(half)
        assert all(torch.equal(a[s], b[s]) for s in SCALES)

    def test_wrong_input(self):
        with pytest.raises(ShapeMismatch):
            FlowNet(3, 4)(torch.zeros(1, 3, 64, 64))

    def test_full_preset_budget(self):
        cfg = NetConfig.full()
        n = count_parameters(FlowNet(3, cfg.flow_width, cfg.flow_depth))
        assert abs(n - 7_000_000) <= 0.2 * 7_000_000

    @pytest.mark.parametrize("cfg", [NetConfig(), NetConfig.full()])
    def test_removed_layer_reduces_parameters(self, cfg):
        base = count_parameters(FlowNet(3, cfg.flow_width, cfg.flow_depth))
        restored = count_parameters(FlowNet(3, cfg.flow_width, cfg.flow_depth + 1))
        assert base < restored


class TestGenerator:
    def test_outputs(self, half):
        g = Generator(4)
        flows = {s: torch.randn(2, 2, s, s) for s in SCALES}
        out = generator_forward(g, half, flows)
        for s in SCALES:
            assert out.images[s].shape == (2, 3, s, s)
            assert out.masks[s].shape == (2, 1, s, s)
            assert 0 <= out.masks[s].min() and out.masks[s].max() <= 1

    @pytest.mark.parametrize("attention", [False, True])
    def test_no_dead_heads(self, half, attention):
        g = Generator(4, attention=attention)
        flows = {s: torch.randn(2, 2, s, s) for s in SCALES}
        out = g(half, flows)
        (sum(t.sum() for t in out.images.values()) + sum(t.sum() for t in out.masks.values())).backward()
        dead = [n for n, p in g.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
        assert dead == []

    def test_missing_flow(self, half):
        with pytest.raises(ShapeMismatch):
            Generator(4)(half, {28: torch.zeros(2, 2, 28, 28)})


class TestDiscriminator:
    def test_range_determinism_and_gradients(self, half):
        d = Discriminator(8).eval()
        p = discriminator_forward(d, half)
        assert ((p > 0) & (p < 1)).all()
        assert torch.equal(p, d(half))
        d.train()
        d(half).sum().backward()
        assert all(q.grad is not None and q.grad.abs().sum() > 0 for q in d.parameters())


class TestDefrontModel:
    def test_synthesize_range(self, half):
        m = DefrontModel(NetConfig(flow_width=4, generator_width=4)).eval()
        img, mask = m.synthesize((half + 1) / 2)
        assert img.shape == (2, 3, 112, 112) and mask.shape == (2, 1, 112, 112)
        assert img.min() >= 0 and img.max() <= 1


class TestBackbone:
    def make(self):
        torch.manual_seed(0)
        bb = ResNetBackbone(width=8, embedding_dim=32)
        bb(torch.rand(4, 3, 112, 112))  # populate running stats
        return bb.eval()

    def test_unit_norm_and_batch_consistency(self):
        bb = self.make()
        x = torch.rand(2, 3, 112, 112)
        with torch.no_grad():
            e = extract_embedding(bb, x)
            torch.testing.assert_close(e.norm(dim=1), torch.ones(2), atol=1e-5, rtol=0)
            singles = torch.cat([extract_embedding(bb, x[i]) for i in range(2)])
            torch.testing.assert_close(e, singles, atol=1e-5, rtol=1e-5)
            assert float(e[0] @ extract_embedding(bb, x[:1])[0]) == pytest.approx(1.0, abs=1e-5)

    def test_scale_stable(self):
        bb = self.make()
        with torch.no_grad():
            bb.features.weight.mul_(1000)
            e = extract_embedding(bb, torch.rand(3, 3, 112, 112))
        torch.testing.assert_close(e.norm(dim=1), torch.ones(3), atol=1e-5, rtol=0)

    def test_bottleneck_preset_builds(self):
        cfg = NetConfig(backbone_block="bottleneck", backbone_layers=(1, 1, 1, 1), backbone_width=4, embedding_dim=16)
        bb = ResNetBackbone.from_config(cfg).eval()
        assert bb(torch.rand(1, 3, 112, 112)).shape == (1, 16)

    def test_shape_check(self):
        with pytest.raises(ShapeMismatch):
            extract_embedding(self.make(), torch.rand(1, 3, 64, 64))


class TestTaps:
    def test_perceptual_and_identity_taps(self):
        x = torch.rand(1, 3, 112, 112)
        taps = feature_net_taps(SmallVGG(4), x)
        assert len(taps) == 5
        again = feature_net_taps(SmallVGG(4), x)
        assert all(taps[k].shape == again[k].shape for k in taps)
        assert set(feature_net_taps(SmallIdentityNet(4), x)) == {"fc2", "pool"}

    def test_unknown_tap(self):
        with pytest.raises(UnknownTap):
            feature_net_taps(SmallVGG(4), torch.rand(1, 3, 112, 112), ["conv9_9"])
        with pytest.raises(UnknownTap):
            feature_net_taps(torch.nn.Conv2d(3, 3, 1), torch.rand(1, 3, 8, 8))

    def test_hook_adapter(self):
        net = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.ReLU(), torch.nn.Conv2d(4, 2, 3))
        taps = HookTapNet(net, {"a": "1", "b": "2"})(torch.rand(1, 3, 10, 10))
        assert taps["a"].shape == (1, 4, 8, 8) and taps["b"].shape == (1, 2, 6, 6)
        with pytest.raises(UnknownTap):
            HookTapNet(net, {"a": "7"})

    def test_seeded_nets_are_reproducible(self):
        a, b = SmallVGG(4, seed=3), SmallVGG(4, seed=3)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestCheckpoints:
    def test_round_trip_bytes(self, tmp_path):
        torch.manual_seed(0)
        net = FlowNet(3, 4)
        save_checkpoint(tmp_path / "a.pt", {"flow": net}, {"width": 4}, 7, {"note": "x"})
        payload = load_checkpoint(tmp_path / "a.pt")
        other = FlowNet(3, 4)
        restore({"flow": other}, payload)
        save_checkpoint(tmp_path / "b.pt", {"flow": other}, payload["config"], payload["step"], payload["extra"])
        assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()
        assert payload["step"] == 7

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"garbage")
        with pytest.raises(CheckpointIOFailure):
            load_checkpoint(tmp_path / "bad.pt")

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("")
        with pytest.raises(CheckpointIOFailure):
            save_checkpoint(tmp_path / "file" / "x.pt", {"d": Discriminator(4)})

import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from realm.encoders import GRUEncoder, NoteEncoder, RagInjector, TimeEncoder, sincos_features

TOL = 1e-10


def gru_reference(ts, w_ih, w_hh, bias):
    """Direct recurrence evaluation in numpy, step by step."""
    t, _f = ts.shape
    d = w_hh.shape[0]
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    h = np.zeros(d)
    out = []
    for i in range(t):
        gx = ts[i] @ w_ih + bias
        gh = h @ w_hh
        r = sig(gx[:d] + gh[:d])
        u = sig(gx[d : 2 * d] + gh[d : 2 * d])
        c = np.tanh(gx[2 * d :] + (r * h) @ w_hh[:, 2 * d :])
        h = u * h + (1.0 - u) * c
        out.append(h.copy())
    return np.stack(out)


class TestGru:
    def test_single_step_matches_hand_gate_equations(self):
        # d=2, F=1, fixed small weights, closed-form one-step check
        enc = GRUEncoder(1, 2).double()
        with torch.no_grad():
            enc.weight_ih.copy_(torch.tensor([[0.1, -0.2, 0.3, 0.05, -0.15, 0.25]], dtype=torch.float64))
            enc.weight_hh.zero_()
            enc.bias.copy_(torch.tensor([0.01, 0.02, -0.01, 0.03, 0.0, -0.02], dtype=torch.float64))
        x = 0.7
        out = enc(torch.tensor([[[x]]], dtype=torch.float64)).detach().numpy()[0, 0]
        sig = lambda v: 1.0 / (1.0 + math.exp(-v))
        # gate order: r, u, c; initial state zero so h1 = (1 - u) * tanh(c_in)
        u = np.array([sig(0.3 * x - 0.01), sig(0.05 * x + 0.03)])
        c = np.tanh(np.array([-0.15 * x + 0.0, 0.25 * x - 0.02]))
        npt.assert_allclose(out, (1.0 - u) * c, atol=TOL)

    def test_zero_input_zero_bias_stays_zero(self):
        # oracle: direct recurrence evaluation (gates sit at 0.5 but the
        # candidate is tanh(0) = 0, so the state never moves)
        enc = GRUEncoder(3, 4).double()
        with torch.no_grad():
            enc.bias.zero_()
        ts = torch.zeros(2, 5, 3, dtype=torch.float64)
        out = enc(ts).detach().numpy()
        npt.assert_array_equal(out, np.zeros_like(out))
        ref = gru_reference(
            np.zeros((5, 3)), enc.weight_ih.detach().numpy(), enc.weight_hh.detach().numpy(),
            enc.bias.detach().numpy(),
        )
        npt.assert_array_equal(ref, np.zeros_like(ref))

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(4)
        enc = GRUEncoder(3, 5).double()
        ts = torch.tensor(rng.normal(size=(2, 6, 3)))
        out = enc(ts).detach().numpy()
        for b in range(2):
            ref = gru_reference(
                ts[b].numpy(),
                enc.weight_ih.detach().numpy(),
                enc.weight_hh.detach().numpy(),
                enc.bias.detach().numpy(),
            )
            npt.assert_allclose(out[b], ref, atol=1e-12)

    def test_feature_permutation_symmetry(self):
        rng = np.random.default_rng(5)
        enc = GRUEncoder(4, 3).double()
        ts = torch.tensor(rng.normal(size=(1, 5, 4)))
        perm = [2, 0, 3, 1]
        enc2 = GRUEncoder(4, 3).double()
        with torch.no_grad():
            enc2.weight_ih.copy_(enc.weight_ih[perm])
            enc2.weight_hh.copy_(enc.weight_hh)
            enc2.bias.copy_(enc.bias)
        npt.assert_allclose(enc(ts).detach().numpy(), enc2(ts[:, :, perm]).detach().numpy(), atol=1e-12)

    def test_rejects_non_finite_input(self):
        enc = GRUEncoder(2, 2)
        bad = torch.zeros(1, 3, 2)
        bad[0, 1, 0] = float("nan")
        with pytest.raises(ValueError, match="impute"):
            enc(bad)

    def test_hidden_values_bounded(self):
        rng = np.random.default_rng(6)
        enc = GRUEncoder(3, 4).double()
        ts = torch.tensor(rng.normal(scale=5.0, size=(4, 30, 3)))
        out = enc(ts).detach().numpy()
        assert np.all(np.abs(out) < 1.0)


class TestSincos:
    def test_time_zero_alternates_zero_one(self):
        feats = sincos_features(torch.zeros(1, 1, dtype=torch.float64), 4, 10000.0).numpy()[0, 0]
        npt.assert_allclose(feats, [0, 1] * 4, atol=TOL)

    def test_matches_independent_recomputation(self):
        # K=4, omega_max=10000, t=12
        t = 12.0
        feats = sincos_features(torch.tensor([[t]], dtype=torch.float64), 4, 10000.0).numpy()[0, 0]
        expected = []
        for k in range(4):
            omega = 10000.0 ** (k / 3)
            expected += [math.sin(t / omega), math.cos(t / omega)]
        npt.assert_allclose(feats, expected, atol=TOL)

    def test_identical_timestamps_identical_rows(self):
        enc = TimeEncoder(6, n_freqs=4).double()
        times = torch.tensor([[3.0, 3.0, 9.0]], dtype=torch.float64)
        out = enc(times).detach().numpy()[0]
        npt.assert_array_equal(out[0], out[1])
        assert not np.array_equal(out[0], out[2])

    def test_output_shape(self):
        enc = TimeEncoder(6, n_freqs=4)
        assert enc(torch.zeros(2, 7)).shape == (2, 7, 6)


class TestNoteEncoder:
    def test_zero_inputs_zero_bias_give_zero_rows(self):
        enc = NoteEncoder(4, 2, with_rag=True).double()
        with torch.no_grad():
            enc.proj.bias.zero_()
        out = enc(torch.zeros(1, 3, 4, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64))
        npt.assert_array_equal(out.detach().numpy(), np.zeros((1, 3, 2)))

    def test_identical_notes_identical_rows(self):
        enc = NoteEncoder(4, 3, with_rag=True).double()
        vec = torch.randn(4, dtype=torch.float64)
        notes = torch.stack([vec, vec]).unsqueeze(0)
        out = enc(notes, torch.randn(1, 4, dtype=torch.float64)).detach().numpy()[0]
        npt.assert_array_equal(out[0], out[1])

    def test_fixed_weights_match_hand_matmul(self):
        # d=2, D=4 -> concat dimension 8
        enc = NoteEncoder(4, 2, with_rag=True).double()
        w = np.arange(16, dtype=np.float64).reshape(2, 8) / 10.0
        b = np.array([0.05, -0.05])
        with torch.no_grad():
            enc.proj.weight.copy_(torch.tensor(w))
            enc.proj.bias.copy_(torch.tensor(b))
        note = np.array([0.1, -0.2, 0.3, 0.4])
        rag = np.array([0.5, 0.6, -0.7, 0.8])
        out = enc(
            torch.tensor(note).reshape(1, 1, 4), torch.tensor(rag).reshape(1, 4)
        ).detach().numpy()[0, 0]
        expected = np.tanh(w @ np.concatenate([note, rag]) + b)
        npt.assert_allclose(out, expected, atol=TOL)

    def test_without_rag_projects_note_alone(self):
        enc = NoteEncoder(4, 2, with_rag=False)
        out = enc(torch.zeros(1, 3, 4))
        assert out.shape == (1, 3, 2)

    def test_missing_rag_vec_rejected_when_required(self):
        enc = NoteEncoder(4, 2, with_rag=True)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 3, 4), None)


class TestRagInjector:
    def test_shapes_and_broadcast(self):
        inj = RagInjector(3, 4).double()
        h = torch.randn(2, 5, 3, dtype=torch.float64)
        rag = torch.randn(2, 4, dtype=torch.float64)
        out = inj(h, rag)
        assert out.shape == (2, 5, 3)

    def test_broadcast_uses_same_rag_every_visit(self):
        inj = RagInjector(2, 2).double()
        h = torch.zeros(1, 3, 2, dtype=torch.float64)
        rag = torch.randn(1, 2, dtype=torch.float64)
        out = inj(h, rag).detach().numpy()[0]
        npt.assert_array_equal(out[0], out[1])
        npt.assert_array_equal(out[1], out[2])


class TestShapeContract:
    @pytest.mark.parametrize("t,f,dd,d", [(1, 1, 8, 2), (4, 3, 16, 4), (7, 19, 32, 6)])
    def test_all_encoders_emit_t_by_d(self, t, f, dd, d):
        b = 2
        assert GRUEncoder(f, d)(torch.zeros(b, t, f)).shape == (b, t, d)
        assert TimeEncoder(d, 4)(torch.zeros(b, t)).shape == (b, t, d)
        assert NoteEncoder(dd, d, True)(torch.zeros(b, t, dd), torch.zeros(b, dd)).shape == (b, t, d)
        assert RagInjector(d, dd)(torch.zeros(b, t, d), torch.zeros(b, dd)).shape == (b, t, d)


def central_difference(fn, tensor, i, h=1e-5):
    flat = tensor.view(-1)
    orig = float(flat[i])
    flat[i] = orig + h
    up = fn()
    flat[i] = orig - h
    down = fn()
    flat[i] = orig
    return (up - down) / (2 * h)


class TestEncoderGradients:
    """Analytic gradients (autograd) vs central finite differences, every
    coordinate of every tensor, float64, small instances (T<=4, F<=3, d<=4)."""

    def check_module(self, module, inputs, seed):
        torch.manual_seed(seed)
        target = torch.randn(1, dtype=torch.float64)

        def loss_fn():
            with torch.no_grad():
                return float(((module(*inputs).sum() - target) ** 2))

        loss = (module(*inputs).sum() - target) ** 2
        loss.backward()
        worst = 0.0
        for name, param in module.named_parameters():
            grad = param.grad
            assert grad is not None, name
            with torch.no_grad():
                for i in range(param.numel()):
                    numeric = central_difference(loss_fn, param.data, i)
                    analytic = float(grad.view(-1)[i])
                    rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
                    worst = max(worst, rel)
        assert worst < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gru(self, seed):
        rng = np.random.default_rng(seed)
        enc = GRUEncoder(3, 4).double()
        ts = torch.tensor(rng.normal(size=(2, 4, 3)))
        self.check_module(enc, (ts,), seed)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_time_encoder(self, seed):
        rng = np.random.default_rng(seed)
        enc = TimeEncoder(4, n_freqs=3).double()
        times = torch.tensor(rng.uniform(0, 50, size=(2, 4)))
        self.check_module(enc, (times,), seed)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_note_encoder(self, seed):
        rng = np.random.default_rng(seed)
        enc = NoteEncoder(3, 4, with_rag=True).double()
        notes = torch.tensor(rng.normal(size=(2, 4, 3)))
        rag = torch.tensor(rng.normal(size=(2, 3)))
        self.check_module(enc, (notes, rag), seed)

    def test_rag_injector(self):
        rng = np.random.default_rng(9)
        inj = RagInjector(4, 3).double()
        h = torch.tensor(rng.normal(size=(2, 4, 4)))
        rag = torch.tensor(rng.normal(size=(2, 3)))
        self.check_module(inj, (h, rag), 9)

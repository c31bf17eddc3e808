import numpy as np
import pytest

from latentnav.config import ModelConfig
from latentnav.embedding import ActionEncoder, ActionLimits, ActionTriple, LatentState
from latentnav.params import ParamSet
from latentnav.tensor import ContractError, Tensor, mse, reverse_accumulate
from latentnav.transition import StateWindow, TransitionModel

from helpers import finite_difference, max_rel_error


def build_model(cfg=None, seed=0):
    cfg = cfg or ModelConfig()
    params = ParamSet()
    rng = np.random.default_rng(seed)
    act = ActionEncoder(params, cfg, ActionLimits(), rng)
    model = TransitionModel(params, cfg, act, rng)
    return model, params, cfg


def random_window(cfg, seed=1, scale=0.5):
    rng = np.random.default_rng(seed)
    w = StateWindow(cfg.context_frames)
    for _ in range(cfg.context_frames):
        tokens = Tensor(rng.uniform(-scale, scale, (cfg.tokens_per_frame, cfg.token_dim)))
        a = ActionTriple(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.7, 0.7))
        w.push(LatentState(tokens, "encoded"), a)
    return w


class TestStateWindow:
    def test_push_evicts_oldest(self):
        w = StateWindow(2)
        for i in range(3):
            w.push(LatentState(Tensor(np.full((2, 2), float(i)))), ActionTriple(0, 0, 0))
        assert w.full
        assert [s.tokens.data[0, 0] for s in w.latents] == [1.0, 2.0]

    def test_tags_track_sources(self):
        w = StateWindow(3)
        w.push(LatentState(Tensor(np.zeros((2, 2))), "encoded"))
        w.push(LatentState(Tensor(np.zeros((2, 2))), "predicted"))
        assert w.tags == ["encoded", "predicted"]

    def test_set_last_action_on_empty_rejected(self):
        with pytest.raises(ContractError):
            StateWindow(2).set_last_action(ActionTriple(0, 0, 0))


class TestSeFuse:
    def test_zero_logits_halve_the_frames(self):
        model, params, cfg = build_model()
        for name in ("se.w1", "se.b1", "se.w2", "se.b2"):
            params[name].data = np.zeros_like(params[name].data)
        w = random_window(cfg)
        frames = w.latents_tensor()
        z = model.action_encoder.encode(ActionTriple(0.2, 0.1, 0.0))
        out = model.se_fuse(frames, z)
        np.testing.assert_array_equal(out.data, 0.5 * frames.data)

    def test_saturated_gate_passes_frames_through(self):
        model, params, cfg = build_model()
        params["se.w2"].data = np.zeros_like(params["se.w2"].data)
        params["se.b2"].data = np.full_like(params["se.b2"].data, 500.0)
        w = random_window(cfg)
        frames = w.latents_tensor()
        z = model.action_encoder.encode(ActionTriple(0.2, 0.1, 0.0))
        out = model.se_fuse(frames, z)
        np.testing.assert_array_equal(out.data, frames.data)

    def test_matches_scalar_recomputation(self):
        model, params, cfg = build_model(seed=4)
        w = random_window(cfg, seed=5)
        frames = w.latents_tensor()
        a = ActionTriple(0.3, -0.4, 0.2)
        z = model.action_encoder.encode(a)
        out = model.se_fuse(frames, z).data

        # independent scalar recomputation of the gate
        zd = z.data
        h = np.tanh(zd @ params["se.w1"].data + params["se.b1"].data)
        logits = h @ params["se.w2"].data + params["se.b2"].data
        gate = 1.0 / (1.0 + np.exp(-logits))
        for t in range(cfg.context_frames):
            for m in range(0, cfg.tokens_per_frame, 5):
                for c in range(0, cfg.token_dim, 7):
                    expected = frames.data[t, m, c] * gate[c]
                    assert out[t, m, c] == pytest.approx(expected, rel=1e-12)


class TestTokenLearn:
    def test_alpha_columns_sum_to_one(self):
        model, _, cfg = build_model()
        model.record_softmax = True
        w = random_window(cfg, seed=6)
        out = model.token_learn(w.latents_tensor())
        assert out.shape == (cfg.context_frames, cfg.learned_tokens, cfg.token_dim)
        sums = model.last_alpha.sum(axis=1)  # over the M input tokens
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_equal_logits_give_token_mean(self):
        model, params, cfg = build_model()
        for name in ("tl.w1", "tl.b1", "tl.w2", "tl.b2"):
            params[name].data = np.zeros_like(params[name].data)
        w = random_window(cfg, seed=7)
        frames = w.latents_tensor()
        out = model.token_learn(frames).data
        mean = frames.data.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out, np.repeat(mean, cfg.learned_tokens, axis=1), atol=1e-12)

    def test_hand_computed_two_token_case(self):
        cfg = ModelConfig(learned_tokens=1)
        model, params, _ = build_model(cfg)
        d = cfg.token_dim
        # craft weights so token0 -> logit 0 and token1 -> logit ln 3
        params["tl.w1"].data = np.zeros_like(params["tl.w1"].data)
        params["tl.w1"].data[0, 0] = 1.0
        params["tl.b1"].data = np.zeros_like(params["tl.b1"].data)
        params["tl.w2"].data = np.zeros_like(params["tl.w2"].data)
        params["tl.w2"].data[0, 0] = np.log(3.0) / np.tanh(1.0)
        params["tl.b2"].data = np.zeros_like(params["tl.b2"].data)

        token0 = np.zeros(d)
        token1 = np.zeros(d)
        token1[0] = 1.0
        token1[5] = 2.0  # rides along; logit depends only on coordinate 0
        frames = Tensor(np.stack([token0, token1])[None, :, :])  # (1, 2, D)
        out = model.token_learn(frames).data[0, 0]
        np.testing.assert_allclose(out, 0.25 * token0 + 0.75 * token1, atol=1e-12)


class TestAttendHistory:
    def test_output_shape_default_config(self):
        model, _, cfg = build_model()
        w = random_window(cfg, seed=8)
        out = model.attend_history(model.token_learn(w.latents_tensor()))
        assert out.shape == (32, 32)  # (T*K, D) = (4*8, 32)

    def test_attention_rows_sum_to_one(self):
        model, _, cfg = build_model()
        model.record_softmax = True
        w = random_window(cfg, seed=9)
        model.attend_history(model.token_learn(w.latents_tensor()))
        assert len(model.last_attention) == cfg.attn_layers
        for layer in model.last_attention:
            np.testing.assert_allclose(layer.sum(axis=-1), 1.0, atol=1e-9)

    def test_single_token_degenerate_attention(self):
        cfg = ModelConfig(context_frames=1, learned_tokens=1)
        model, _, _ = build_model(cfg)
        model.record_softmax = True
        frames = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, cfg.tokens_per_frame, cfg.token_dim)))
        out = model.attend_history(model.token_learn(frames))
        assert out.shape == (1, cfg.token_dim)
        for layer in model.last_attention:
            np.testing.assert_array_equal(layer, np.ones_like(layer))


class TestTokenFuse:
    def test_zero_values_give_zero_output(self):
        model, params, cfg = build_model()
        params["tf.mix"].data = np.zeros_like(params["tf.mix"].data)
        params["tf.bias"].data = np.zeros_like(params["tf.bias"].data)
        w = random_window(cfg, seed=10)
        raw = w.latents_tensor()
        attended = model.attend_history(model.token_learn(model.se_fuse(
            raw, model.action_encoder.encode(ActionTriple(0.1, 0.1, 0.1)))))
        out = model.token_fuse(raw, attended)
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_one_hot_weights_copy_selected_value_row(self):
        model, params, cfg = build_model(seed=11)
        j = 5
        params["tf.w2"].data = np.zeros_like(params["tf.w2"].data)
        b2 = np.full(params["tf.b2"].shape, -50.0)
        b2[j] = 50.0
        params["tf.b2"].data = b2
        w = random_window(cfg, seed=12)
        raw = w.latents_tensor()
        rng = np.random.default_rng(13)
        attended = Tensor(rng.uniform(-1, 1, (cfg.context_frames * cfg.learned_tokens, cfg.token_dim)))
        out = model.token_fuse(raw, attended).data
        values = params["tf.mix"].data @ attended.data + params["tf.bias"].data[:, None]
        for t in range(cfg.context_frames):
            for m in range(cfg.tokens_per_frame):
                np.testing.assert_allclose(out[t, m], values[j], atol=1e-9)

    def test_gradients_flow_to_both_inputs(self):
        model, _, cfg = build_model(seed=14)
        rng = np.random.default_rng(15)
        raw_arr = rng.uniform(-1, 1, (cfg.context_frames, cfg.tokens_per_frame, cfg.token_dim))
        at_arr = rng.uniform(-1, 1, (cfg.context_frames * cfg.learned_tokens, cfg.token_dim))
        target = rng.uniform(-1, 1, (cfg.context_frames, cfg.tokens_per_frame, cfg.token_dim))

        def forward():
            raw = Tensor(raw_arr, requires_grad=True)
            at = Tensor(at_arr, requires_grad=True)
            return mse(model.token_fuse(raw, at), Tensor(target)), (raw, at)

        loss, (raw, at) = forward()
        reverse_accumulate(loss)
        fd = finite_difference(lambda: forward()[0].item(), [raw_arr, at_arr])
        assert np.any(raw.grad != 0) and np.any(at.grad != 0)
        assert max_rel_error(raw.grad, fd[0]) < 1e-4
        assert max_rel_error(at.grad, fd[1]) < 1e-4


class TestPredictNext:
    def test_output_shape_and_tag(self):
        model, _, cfg = build_model()
        w = random_window(cfg, seed=16)
        out = model.predict_next(w.latents_tensor())
        assert out.shape == (cfg.tokens_per_frame, cfg.token_dim)
        assert out.source == "predicted"

    def test_averaging_kernel_identity_mlp_gives_frame_mean(self):
        cfg = ModelConfig(head_hidden=32)  # square MLP so a scaled identity fits
        model, params, _ = build_model(cfg)
        t, d = cfg.context_frames, cfg.token_dim
        eps = 1e-4
        params["head.kernel"].data = np.full((t, d), 1.0 / t)
        params["head.w1"].data = eps * np.eye(d)
        params["head.b1"].data = np.zeros(d)
        params["head.w2"].data = (1.0 / eps) * np.eye(d)
        params["head.b2"].data = np.zeros(d)
        w = random_window(cfg, seed=17)
        frames = w.latents_tensor()
        out = model.predict_next(frames)
        np.testing.assert_allclose(out.tokens.data, frames.data.mean(axis=0), atol=1e-9)

    def test_sensitive_to_most_recent_frame(self):
        model, _, cfg = build_model(seed=18)
        w = random_window(cfg, seed=19)
        frames = w.latents_tensor()
        base = model.predict_next(frames).tokens.data
        bumped = frames.data.copy()
        bumped[-1] += 0.1
        out = model.predict_next(Tensor(bumped)).tokens.data
        assert np.linalg.norm(out - base) > 0.0


class TestTransitionStep:
    def test_deterministic(self):
        model, _, cfg = build_model(seed=20)
        w = random_window(cfg, seed=21)
        a = model.transition_step(w).tokens.data
        b = model.transition_step(w).tokens.data
        assert a.tobytes() == b.tobytes()

    def test_equals_manual_stage_chain(self):
        model, _, cfg = build_model(seed=22)
        w = random_window(cfg, seed=23)
        composed = model.transition_step(w).tokens.data

        raw = w.latents_tensor()
        z = model.action_encoder.encode(w.actions[-1])
        manual = model.predict_next(
            model.token_fuse(raw, model.attend_history(model.token_learn(model.se_fuse(raw, z))))
        ).tokens.data
        assert composed.tobytes() == manual.tobytes()

    def test_changing_latest_action_changes_prediction(self):
        model, _, cfg = build_model(seed=24)
        w = random_window(cfg, seed=25)
        base = model.transition_step(w).tokens.data
        w.set_last_action(ActionTriple(-0.9, 0.8, -0.5))
        changed = model.transition_step(w).tokens.data
        assert np.linalg.norm(changed - base) > 0.0

    def test_underfilled_window_rejected(self):
        model, _, cfg = build_model()
        w = StateWindow(cfg.context_frames)
        w.push(LatentState(Tensor(np.zeros((cfg.tokens_per_frame, cfg.token_dim)))), None)
        with pytest.raises(ContractError):
            model.transition_step(w)

    def test_missing_newest_action_rejected(self):
        model, _, cfg = build_model()
        w = random_window(cfg, seed=26)
        w.push(LatentState(Tensor(np.zeros((cfg.tokens_per_frame, cfg.token_dim)))), None)
        with pytest.raises(ContractError):
            model.transition_step(w)

    def test_step_counter_increments(self):
        model, _, cfg = build_model()
        w = random_window(cfg, seed=27)
        before = model.step_count
        model.transition_step(w)
        model.transition_step(w)
        assert model.step_count == before + 2


class TestModelScale:
    def test_default_parameter_count_under_one_million(self):
        _, params, _ = build_model()
        assert params.n_params() < 1_000_000

    def test_ablated_variants_construct_and_step(self):
        for tl, tf in [(False, True), (True, False), (False, False)]:
            kwargs = dict(use_token_learner=tl, use_token_fuser=tf)
            if not tf and tl:
                # fuser off requires the learner's output to keep the full grid
                kwargs["learned_tokens"] = ModelConfig().tokens_per_frame
            cfg = ModelConfig(**kwargs)
            model, _, _ = build_model(cfg, seed=30)
            out = model.transition_step(random_window(cfg, seed=31))
            assert out.shape == (cfg.tokens_per_frame, cfg.token_dim)


class TestGradientFlow:
    def test_stage_parameters_match_finite_differences(self):
        model, params, cfg = build_model(seed=32)
        w = random_window(cfg, seed=33)
        target = np.random.default_rng(34).uniform(-1, 1, (cfg.tokens_per_frame, cfg.token_dim))

        def loss_value():
            return mse(model.transition_step(w).tokens, Tensor(target))

        params.zero_grads()
        reverse_accumulate(loss_value())
        rng = np.random.default_rng(35)
        groups = {"se": [], "tl": [], "attn": [], "tf": [], "head": [], "act": []}
        for name in params.names():
            groups[params.group_of(name)].append(name)
        for group, names in groups.items():
            name = names[rng.integers(len(names))]
            arr = params[name].data
            flat_idx = int(rng.integers(arr.size))
            idx = np.unravel_index(flat_idx, arr.shape)
            got = params[name].grad[idx]
            h = 1e-5
            orig = arr[idx]
            arr[idx] = orig + h
            plus = loss_value().item()
            arr[idx] = orig - h
            minus = loss_value().item()
            arr[idx] = orig
            want = (plus - minus) / (2 * h)
            assert abs(got - want) / max(abs(want), 1e-6) < 1e-3, (group, name)

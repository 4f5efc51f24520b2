"""Acceptance gate: twelve behavioral criteria, one printed verdict line each.

Run with `pytest tests/test_acceptance.py -v -s` to see every verdict line;
without -s pytest shows the lines for failing criteria only.  The two
training criteria (10 and 11) dominate the runtime at a few minutes total;
everything else finishes in seconds.
"""

import numpy as np
import pytest

from mvsa import tensor as tz
from mvsa.config import ModelConfig, ScheduleConfig, TrainingConfig, load_config
from mvsa.evaluation import eer, evaluate_identification, evaluate_verification
from mvsa.features import spec_augment, synth_corpus
from mvsa.masks import WindowSchedule, build_mask_set, reachability_oracle
from mvsa.rng import RngState
from mvsa.tensor import Tensor, grad_check
from mvsa.training import train, triangular_lr
from mvsa.transformer import EncoderLayerParams, PrenetParams, prenet, prenet_output_length
from mvsa.variants import PoolingParams, SpeakerModel, attentive_stats_pool, count_parameters


def verdict(number: int, ok: bool, detail: str) -> None:
    print(f"[criterion {number:02d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {number}: {detail}"


class TestAcceptance:
    def test_01_band_masks_match_brute_force_predicate(self):
        bad = 0
        for heads in (1, 2, 4, 8):
            schedule = WindowSchedule.exponential(heads)
            for n in range(1, 33):
                mask_set = build_mask_set(schedule, n)
                for h, w in enumerate(schedule.per_head_window):
                    half = (w - 1) // 2
                    for t in range(n):
                        for u in range(n):
                            want = 1.0 if abs(t - u) <= half else 0.0
                            bad += mask_set.masks[h, t, u] != want
        windows_8 = WindowSchedule.exponential(8).per_head_window
        ok = bad == 0 and windows_8 == (1, 3, 5, 9, 17, 33, 65, 129)
        verdict(1, ok, f"band masks entry-exact over H in {{1,2,4,8}}, N 1..32 "
                       f"({bad} mismatches); 8-head windows {windows_8}")

    def test_02_stacked_reachability_follows_the_band_growth_law(self):
        bad = 0
        schedule = WindowSchedule.exponential(8)
        for n in range(1, 33):
            t, u = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            for layers in range(1, 7):
                reach = reachability_oracle(schedule, layers, n)
                for h, w in enumerate(schedule.per_head_window):
                    half = (w - 1) // 2
                    want = np.abs(t - u) <= layers * half
                    bad += int((reach[h] != want).sum())
        verdict(2, bad == 0, f"mask powers equal per-layer band growth for l<=6, N<=32 ({bad} cells off)")

    def test_03_weight_masking_is_exact_on_the_value_path(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(1, 2, 12, 8)))
        k = Tensor(rng.normal(size=(1, 2, 12, 8)))
        v_base = rng.normal(size=(1, 2, 12, 8))
        mask_set = build_mask_set(WindowSchedule((1, 5)), 12)
        from mvsa.attention import multi_view_attention

        want_dense = None
        full = build_mask_set(WindowSchedule.full(2, 12), 12)
        dense_gap = 0.0
        for mode in ("post_softmax", "pre_softmax"):
            got = multi_view_attention(q, k, Tensor(v_base), full, mode=mode).data
            if want_dense is None:
                d_k = 8
                s = q.data @ np.swapaxes(k.data, -1, -2) / np.sqrt(d_k)
                e = np.exp(s - s.max(axis=-1, keepdims=True))
                want_dense = (e / e.sum(axis=-1, keepdims=True)) @ v_base
            dense_gap = max(dense_gap, float(np.abs(got - want_dense).max()))

        base = multi_view_attention(q, k, Tensor(v_base), mask_set, mode="post_softmax").data
        leaks = 0
        for h in range(2):
            for u in range(12):
                bumped = v_base.copy()
                bumped[0, h, u] += 1.0  # finite difference on the value row
                other = multi_view_attention(q, k, Tensor(bumped), mask_set, mode="post_softmax").data
                for t in range(12):
                    if mask_set.masks[h, t, u] == 0.0:
                        leaks += int((base[0, h, t] != other[0, h, t]).any())
        ok = dense_gap < 1e-12 and leaks == 0
        verdict(3, ok, f"all-ones mask equals dense attention (max gap {dense_gap:.2e}); "
                       f"masked value rows are invisible bit-for-bit ({leaks} leaks)")

    def test_04_gradients_check_out_for_primitives_and_all_variants(self):
        worst = {}
        check_rng = RngState(17)
        r = np.random.default_rng(1)

        def leaf(shape):
            return Tensor(r.normal(size=shape) + 2.5, requires_grad=True)

        a, b = leaf((3, 4)), leaf((3, 4))
        m1, m2 = leaf((3, 5)), leaf((5, 4))
        gain, bias = leaf((4,)), leaf((4,))
        kern = leaf((3, 2, 3))
        seq = leaf((2, 8, 2))
        w_lin = leaf((5, 2))
        primitives = {
            "add": lambda: (tz.add(a, b) ** 2.0).sum(),
            "mul": lambda: (tz.mul(a, b) ** 2.0).sum(),
            "div": lambda: tz.div(a, b).sum(),
            "exp": lambda: tz.exp(a * 0.1).sum(),
            "log": lambda: tz.log(a).sum(),
            "sqrt": lambda: tz.sqrt(a).sum(),
            "tanh": lambda: tz.tanh(a).sum(),
            "relu": lambda: (tz.relu(a - 2.5) ** 2.0).sum(),
            "clamp_min": lambda: tz.clamp_min(a, 2.0).sum(),
            "matmul": lambda: (tz.matmul(m1, m2) ** 2.0).sum(),
            "linear": lambda: (tz.linear(m1, w_lin) ** 2.0).sum(),
            "softmax": lambda: (tz.softmax(a) ** 2.0).sum(),
            "log_softmax": lambda: (tz.log_softmax(a) ** 2.0).sum(),
            "layer_norm": lambda: (tz.layer_norm(a, gain, bias) ** 2.0).sum(),
            "conv1d": lambda: (tz.conv1d(seq, kern, stride=2, padding=1) ** 2.0).sum(),
            "masked_fill": lambda: tz.exp(tz.masked_fill(a, np.eye(3, 4), -30.0) * 0.1).sum(),
            "concat": lambda: (tz.concat([a, b], axis=1) ** 2.0).sum(),
            "mean": lambda: (tz.mean_(a, axis=1) ** 2.0).sum(),
        }
        for name, f in primitives.items():
            worst[name] = grad_check(f, (a, b, m1, m2, gain, bias, kern, seq, w_lin), rng=check_rng)

        x = Tensor(r.normal(size=(2, 12, 6)), requires_grad=True)
        for variant in ("a", "b", "c", "d", "e"):
            config = ModelConfig(
                n_encoder_layers=2, n_decoder_layers=1, d_model=16, d_ff=24, heads=2,
                dropout=0.0, variant=variant, feature_dim=6, embedding_dim=16, n_speakers=3,
            )
            model = SpeakerModel.build(config, RngState(3))
            params = model.named_parameters()
            labels = np.array([0, 2])

            def loss():
                from mvsa.training import cross_entropy

                _, logits = model.forward(x)
                return cross_entropy(logits, labels)

            subset = [x] + list(params.values())[:: max(1, len(params) // 12)]
            worst[f"variant_{variant}"] = grad_check(loss, subset, rng=check_rng)

        peak = max(worst.values())
        culprit = max(worst, key=worst.get)
        verdict(4, peak < 1e-4, f"worst finite-difference error {peak:.3e} ({culprit}) across "
                                f"{len(primitives)} primitives and 5 end-to-end variants")

    def test_05_reference_model_size_lands_in_the_published_range(self):
        config = load_config("configs/full.cfg").model
        total, breakdown = count_parameters(config)
        layer = EncoderLayerParams.init(config, RngState(0))
        measured_layer = sum(p.data.size for p in layer.named("x").values())
        d, f = config.d_model, config.d_ff
        closed_form = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
        parts = " ".join(f"{k}={v:,}" for k, v in sorted(breakdown.items()))
        ok = (
            33_000_000 <= total <= 36_000_000
            and measured_layer == closed_form
            and breakdown["encoder"] == config.n_encoder_layers * closed_form + 2 * d
        )
        verdict(5, ok, f"total {total:,} in [33.0M, 36.0M]; encoder layer {measured_layer:,} "
                       f"== closed form {closed_form:,}; breakdown: {parts}")

    def test_06_prenet_downsamples_four_to_one(self):
        params = PrenetParams.init(8, 16, RngState(0))
        n200 = prenet(params, Tensor(np.zeros((1, 200, 8)))).n_steps
        bad = []
        for t in range(4, 513):
            walk = t
            for _ in range(2):  # two stride-2 kernel-3 passes, padding 1
                padded, count, start = walk + 2, 0, 0
                while start + 3 <= padded:
                    count += 1
                    start += 2
                walk = count
            if prenet_output_length(t) != walk:
                bad.append(t)
        ok = n200 == 50 and not bad
        verdict(6, ok, f"T=200 -> {n200} tokens; formula matches stride walk on T in [4,512] "
                       f"({len(bad)} mismatches)")

    def test_07_pooling_reduces_to_plain_statistics_under_uniform_weights(self):
        rng = np.random.default_rng(2)
        h = rng.normal(size=(4, 9, 6))
        params = PoolingParams.init(6, 5, RngState(1))
        params.v.data[:] = 0.0  # uniform attention
        out = attentive_stats_pool(Tensor(h), params).data
        gap_mu = float(np.abs(out[:, :6] - h.mean(axis=1)).max())
        gap_sd = float(np.abs(out[:, 6:] - h.std(axis=1, ddof=0)).max())
        floor = np.sqrt(params.eps_var)
        min_sigma = floor
        for probe in (h, np.zeros((2, 1, 6)), np.full((2, 7, 6), 3.3)):
            sig = attentive_stats_pool(Tensor(probe), PoolingParams.init(6, 5, RngState(2))).data[:, 6:]
            min_sigma = min(min_sigma, float(sig.min()))
        ok = gap_mu < 1e-10 and gap_sd < 1e-10 and min_sigma >= floor * (1.0 - 1e-12)
        verdict(7, ok, f"uniform pooling off by (mu {gap_mu:.1e}, sigma {gap_sd:.1e}); "
                       f"sigma never below sqrt(1e-8) (observed min {min_sigma:.3e})")

    def test_08_equal_error_rate_matches_the_exhaustive_sweep(self):
        from tests.test_evaluation import eer_counting_oracle

        rng = np.random.default_rng(3)
        labels = np.concatenate([np.ones(500, dtype=int), np.zeros(500, dtype=int)])
        scores = np.concatenate([rng.normal(0.8, 1.0, 500), rng.normal(0.0, 1.0, 500)])
        got = eer(labels, scores)
        want = eer_counting_oracle(labels.tolist(), scores.tolist())
        gap = abs(got[0] - want[0])
        sep, _ = eer([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1])
        inv, _ = eer([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9])
        ok = gap < 1e-9 and sep == 0.0 and inv == 100.0
        verdict(8, ok, f"1000-trial sweep gap {gap:.2e}; separated -> {sep}%, inverted -> {inv}%")

    def test_09_triangular_schedule_hits_the_documented_anchors_exactly(self):
        s = ScheduleConfig(lr_min=1e-8, lr_max=5e-4, cycle_steps=60000, n_cycles=2)
        got = [triangular_lr(step, s) for step in (0, 15000, 30000, 60000)]
        want = [1e-8, 2.50005e-4, 5e-4, 1e-8]
        ok = got == want
        verdict(9, ok, f"steps (0, 15000, 30000, 60000) -> {got} == {want}")

    @pytest.mark.parametrize("multi_view", [True, False], ids=["multi_view", "single_view"])
    def test_10_small_corpus_is_learnable_end_to_end(self, multi_view):
        corpus = synth_corpus(20, 50, 200, seed=11)
        model_config = ModelConfig(
            n_encoder_layers=2, n_decoder_layers=1, d_model=64, d_ff=128, heads=4,
            dropout=0.1, variant="e", multi_view=multi_view, feature_dim=80,
            embedding_dim=64, n_speakers=20,
        )
        config = TrainingConfig(
            model=model_config,
            schedule=ScheduleConfig(lr_min=1e-5, lr_max=2e-3, cycle_steps=300, n_cycles=1),
            batch_size=32, steps=300, crop_frames=200, spec_augment=True,
            log_interval=50, checkpoint_interval=1000,
        )
        result = train(config, corpus.train, seed=5)
        train_acc = evaluate_identification(result.model, corpus.train, result.speakers)
        test_acc = evaluate_identification(result.model, corpus.test, result.speakers)
        features = {m.utterance_id: m for m in corpus.test}
        test_eer, _, _ = evaluate_verification(result.model, features, corpus.trials)
        ok = train_acc >= 95.0 and test_acc >= 80.0 and test_eer <= 10.0
        verdict(10, ok, f"multi_view={multi_view}: 300 steps -> train acc {train_acc:.2f}% (>=95), "
                        f"held-out acc {test_acc:.2f}% (>=80), held-out EER {test_eer:.2f}% (<=10)")

    def test_11_identical_seeds_leave_identical_artifacts(self, tmp_path):
        from mvsa.cli import dispatch

        data = tmp_path / "data"
        assert dispatch([
            "synth-data", "--out", str(data), "--speakers", "4", "--utts", "6",
            "--frames", "48", "--seed", "3", "--test-fraction", "0.34",
        ]) == 0
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(
            "variant = e\nn_encoder_layers = 1\nd_model = 32\nd_ff = 64\nheads = 2\n"
            "feature_dim = 80\nembedding_dim = 32\nn_speakers = 4\n"
            "lr_min = 1e-05\nlr_max = 0.002\ncycle_steps = 12\nn_cycles = 1\n"
            "batch_size = 8\nsteps = 12\ncrop_frames = 48\nlog_interval = 4\n"
            "checkpoint_interval = 6\n"
        )
        outs = (tmp_path / "run_a", tmp_path / "run_b")
        for out in outs:
            assert dispatch([
                "train", "--config", str(cfg), "--data", str(data),
                "--out", str(out), "--seed", "9",
            ]) == 0
        same_log = (outs[0] / "metrics.log").read_bytes() == (outs[1] / "metrics.log").read_bytes()
        same_ckpt = (outs[0] / "checkpoint.mvsa").read_bytes() == (outs[1] / "checkpoint.mvsa").read_bytes()
        verdict(11, same_log and same_ckpt,
                f"two seed-9 runs: metrics logs identical={same_log}, checkpoints identical={same_ckpt}")

    def test_12_augmentation_masks_stay_inside_their_budgets(self):
        x = np.full((100, 80), 2.0)
        rng = RngState(123)
        worst_rows, worst_cols = 0, 0
        for _ in range(10_000):
            out = spec_augment(x, rng)
            worst_rows = max(worst_rows, int((out == 0.0).all(axis=1).sum()))
            worst_cols = max(worst_cols, int((out == 0.0).all(axis=0).sum()))

        class _Zeros:
            def integers(self, low, high):
                return low

        identity = bool((spec_augment(x, _Zeros()) == x).all())
        ok = worst_rows <= 40 and worst_cols <= 20 and identity
        verdict(12, ok, f"10,000 draws: max masked frames {worst_rows} (<=40), "
                        f"max masked banks {worst_cols} (<=20); zero-width draws are identity={identity}")

import math

import numpy as np
import pytest

from sadp.corpus import TokenSequence, build_vocab, load_corpus, tokenize_all
from sadp.dp_core import perturb_sequence
from sadp.noise_policy import NoisePolicy, annotate
from sadp.pii_detect import PiiRegistry, detect_corpus, group_by_doc, project_spans
from sadp.rng import RngStream
from sadp.scoring import score_all
from sadp.trainer import (
    DP_SGD,
    NO_DP,
    SA_ADP,
    DivergenceError,
    ModelParams,
    TrainConfig,
    Window,
    assemble_gradient,
    batch_terms,
    evaluate,
    forward_loss,
    load_checkpoint,
    make_windows,
    per_token_grads,
    record_clip_factors,
    sa_adp_gradient,
    save_checkpoint,
    token_clip_factors,
    train,
)


def _params(v=16, d=8, seed=0, scale=0.5):
    return ModelParams.init(v, d, RngStream(seed), scale)


def _seq(doc_id, toks):
    return TokenSequence(doc_id, tuple(toks), tuple((i, i + 1) for i in range(len(toks))))


def _toy(n_docs=120, policy=None):
    from sadp import toydata
    from sadp.corpus import Document

    lines, _ = toydata.support_corpus(n_docs, seed=3)
    docs = [Document(f"L{i + 1}", t) for i, t in enumerate(lines)]
    vocab = build_vocab(docs, 80)
    seqs = tokenize_all(docs, vocab)
    reg = PiiRegistry.default()
    spans = detect_corpus(docs, reg)
    rep = score_all(spans, reg)
    by = group_by_doc(spans)
    policy = policy or NoisePolicy()
    ann = [annotate(s, project_spans(by.get(s.doc_id, []), s, rep.scores()), rep, policy) for s in seqs]
    return vocab, seqs, ann


class TestForward:
    def test_uniform_logits(self):
        p = ModelParams(10, 3)
        loss, per = forward_loss(p, [1, 2, 3, 4])
        np.testing.assert_allclose(per, math.log(10), rtol=1e-14)

    def test_hand_fixture(self):
        p = ModelParams(4, 2)
        p.E[...] = [[1, 0], [0, 1], [1, 1], [0, 0]]
        p.W[...] = [[1, 0, 0, 0], [0, 1, 0, 0]]
        loss, _ = forward_loss(p, [0, 1, 2])
        assert loss == pytest.approx(math.log(math.e + 3), abs=1e-14)

    def test_short_window(self):
        with pytest.raises(ValueError):
            forward_loss(ModelParams(4, 2), [1])

    def test_token_out_of_range(self):
        with pytest.raises(ValueError):
            forward_loss(ModelParams(4, 2), [1, 4])


class TestGradients:
    def test_finite_differences(self, backend):
        rnd = np.random.default_rng(0)
        for point in range(5):
            p = _params(seed=point)
            window = rnd.integers(0, 16, size=6)
            grads = per_token_grads(p, window)
            coords = rnd.choice(p.size, size=12, replace=False)
            # include the touched rows of E, which are the sparse part
            coords = np.concatenate([coords, window[:-1] * p.d])
            for i, g in enumerate(grads):
                for c in coords:
                    h = 1e-5
                    up, dn = p.copy(), p.copy()
                    up.theta[c] += h
                    dn.theta[c] -= h
                    fd = (forward_loss(up, window)[1][i] - forward_loss(dn, window)[1][i]) / (2 * h)
                    assert abs(g[c] - fd) <= 1e-5 * max(abs(fd), 1e-3)

    def test_sum_is_mean_loss_gradient(self):
        p = _params()
        window = np.array([3, 1, 4, 1, 5, 9, 2])
        g = np.mean(per_token_grads(p, window), axis=0)
        rnd = np.random.default_rng(1)
        for c in rnd.choice(p.size, 20, replace=False):
            up, dn = p.copy(), p.copy()
            up.theta[c] += 1e-6
            dn.theta[c] -= 1e-6
            fd = (forward_loss(up, window)[0] - forward_loss(dn, window)[0]) / 2e-6
            assert g[c] == pytest.approx(fd, abs=1e-8)

    def test_single_token_window(self):
        assert per_token_grads(_params(), [3]) == []

    def test_assemble_matches_materialized(self, backend):
        p = _params()
        rnd = np.random.default_rng(2)
        windows = [rnd.integers(0, 16, size=k) for k in (5, 2, 9)]
        terms = batch_terms(p, windows)
        w = rnd.uniform(size=terms.n)
        mats = [g for win in windows for g in per_token_grads(p, win)]
        want = sum(wi * g for wi, g in zip(w, mats))
        np.testing.assert_allclose(assemble_gradient(p, terms, w), want, atol=1e-13)

    def test_token_clip_factors(self, backend):
        p = _params()
        windows = [np.array([1, 1, 2, 1, 1])]
        f = token_clip_factors(batch_terms(p, windows), 0.3)
        norms = [np.linalg.norm(g) for g in per_token_grads(p, windows[0])]
        np.testing.assert_allclose(f, np.minimum(1, 0.3 / np.array(norms)), rtol=1e-12)

    def test_record_clip_factors(self, backend):
        p = _params()
        windows = [np.array([1, 1, 2, 1, 1]), np.array([4, 5, 4])]
        terms = batch_terms(p, windows)
        f = record_clip_factors(terms, 0.2)
        got = assemble_gradient(p, terms, f)
        want = 0
        for win in windows:
            g = np.mean(per_token_grads(p, win), axis=0)
            want = want + g * min(1.0, 0.2 / np.linalg.norm(g))
        np.testing.assert_allclose(got, want, atol=1e-13)

    def test_fast_path_equals_perturb_sequence(self):
        p = _params()
        window = np.array([1, 2, 3, 4, 5, 6])
        sig = np.array([0, 3.0, 0, 2.0, 0])
        policy = NoisePolicy()
        rng = RngStream(5, (1, 0))
        fast = sa_adp_gradient(p, batch_terms(p, [window]), sig, policy, rng)
        slow, _ = perturb_sequence(per_token_grads(p, window), sig, policy, rng)
        np.testing.assert_allclose(fast, slow, atol=1e-12)


class TestWindows:
    def test_cut(self):
        ws = make_windows([_seq("a", range(10))], 4)
        assert [len(w.tokens) for w in ws] == [4, 4, 2]
        assert len(make_windows([_seq("a", range(9))], 4)) == 2

    def test_position_sigmas_take_max(self):
        w = Window(np.arange(4), np.array([0.0, 3.0, 0.0, 2.0]))
        assert w.position_sigmas().tolist() == [3.0, 3.0, 2.0]

    def test_annotation_mismatch(self):
        _, seqs, ann = _toy(5)
        with pytest.raises(ValueError):
            make_windows(seqs[:2], 8, ann[1:3])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = _params()
        save_checkpoint(tmp_path / "c.bin", p)
        q = load_checkpoint(tmp_path / "c.bin")
        assert q.theta.tobytes() == p.theta.tobytes() and (q.vocab_size, q.d) == (16, 8)
        assert (tmp_path / "c.bin").read_bytes()[:4] == b"SADP"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.bin")


class TestEvaluate:
    def test_uniform_model(self):
        m = evaluate(ModelParams(12, 2), [np.array([1, 2, 3, 4, 5])])
        assert m.perplexity == pytest.approx(12.0, rel=1e-12)

    def test_one_hot_limit(self):
        p = ModelParams(3, 3)
        p.E[...] = np.eye(3)
        ppl = []
        for scale in (1, 5, 20):
            p.W[...] = scale * np.roll(np.eye(3), 1, axis=1)
            m = evaluate(p, [np.array([0, 1, 2, 0])])
            ppl.append(m.perplexity)
            assert m.accuracy == 1.0
        assert ppl == sorted(ppl, reverse=True) and ppl[-1] == pytest.approx(1.0, abs=1e-7)

    def test_reference(self):
        p = _params(seed=3)
        wins = [np.array([1, 5, 7, 2]), np.array([9, 9, 0])]
        nll, hit, n = 0.0, 0, 0
        for w in wins:
            for a, b in zip(w[:-1], w[1:]):
                z = p.E[a] @ p.W + p.b
                nll += np.log(np.exp(z - z.max()).sum()) + z.max() - z[b]
                hit += int(np.argmax(z) == b)
                n += 1
        m = evaluate(p, wins)
        assert m.perplexity == pytest.approx(math.exp(nll / n), rel=1e-12)
        assert m.accuracy == hit / n


class TestTrain:
    CFG = TrainConfig(learning_rate=1.0, epochs=2, sample_rate=0.2, d=8, seq_len=16)

    def test_zero_policy_equals_baseline(self):
        vocab, seqs, _ = _toy(80)
        _, _, ann0 = _toy(80, NoisePolicy.zero())
        a = train(seqs, vocab.vocab_size, self.CFG)
        b = train(seqs, vocab.vocab_size, TrainConfig(**{**self.CFG.__dict__, "arm": SA_ADP, "policy": NoisePolicy.zero()}), ann0)
        assert a.params.theta.tobytes() == b.params.theta.tobytes()

    def test_deterministic(self):
        vocab, seqs, ann = _toy(60)
        cfg = TrainConfig(**{**self.CFG.__dict__, "arm": SA_ADP})
        a = train(seqs, vocab.vocab_size, cfg, ann)
        b = train(seqs, vocab.vocab_size, cfg, ann)
        assert a.params.theta.tobytes() == b.params.theta.tobytes()
        assert a.metrics.rows == b.metrics.rows

    def test_seed_changes_result(self):
        vocab, seqs, ann = _toy(60)
        a = train(seqs, vocab.vocab_size, self.CFG)
        b = train(seqs, vocab.vocab_size, TrainConfig(**{**self.CFG.__dict__, "seed": 1}))
        assert a.params.theta.tobytes() != b.params.theta.tobytes()

    def test_dp_sgd_ledger(self):
        vocab, seqs, _ = _toy(30)
        cfg = TrainConfig(**{**self.CFG.__dict__, "arm": DP_SGD, "sigma": 2.0, "max_steps": 3, "epochs": 10})
        res = train(seqs, vocab.vocab_size, cfg)
        assert res.steps == 3
        assert res.ledger.total_at(32) == pytest.approx(12.0, abs=1e-12)
        assert res.ledger.convert().epsilon_at_32 == pytest.approx(12.0 + math.log(1e5) / 31, abs=1e-9)

    def test_no_dp_has_no_ledger(self):
        vocab, seqs, _ = _toy(30)
        res = train(seqs, vocab.vocab_size, self.CFG)
        assert res.ledger is None
        assert len(res.metrics.rows) == 2

    def test_training_reduces_loss(self):
        vocab, seqs, _ = _toy(200)
        cfg = TrainConfig(learning_rate=2.0, epochs=5, sample_rate=0.1, d=8)
        res = train(seqs, vocab.vocab_size, cfg)
        ppl = [r["perplexity"] for r in res.metrics.rows]
        assert ppl[-1] < ppl[0] < vocab.vocab_size

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        vocab, seqs, _ = _toy(40)
        cfg = TrainConfig(learning_rate=1e200, epochs=3, sample_rate=0.5, d=8, init_scale=1.0)
        with pytest.raises(DivergenceError):
            train(seqs, vocab.vocab_size, cfg)

    def test_sa_adp_needs_annotations(self):
        vocab, seqs, _ = _toy(10)
        with pytest.raises(ValueError):
            train(seqs, vocab.vocab_size, TrainConfig(arm=SA_ADP))

    def test_metrics_csv(self):
        vocab, seqs, _ = _toy(30)
        text = train(seqs, vocab.vocab_size, self.CFG).metrics.to_csv("T")
        lines = text.splitlines()
        assert lines[0] == "# generated T"
        assert lines[1].startswith("epoch,step,arm,loss,accuracy,perplexity")
        assert len(lines) == 4

    @pytest.mark.parametrize("kw", [{"arm": "x"}, {"learning_rate": 0}, {"sample_rate": 1.5}, {"optimizer": "rmsprop"}])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

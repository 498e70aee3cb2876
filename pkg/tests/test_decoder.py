"""Decoder contracts: greedy, beam, streaming equivalence, language switch."""

import numpy as np
import pytest

from bilingual_rnnt.corpus import CorpusConfig, language_tables, synth_utterance
from bilingual_rnnt.decoder import (
    DecodeResult,
    ModelSession,
    StreamingDecoder,
    beam_search,
    greedy_decode,
    nbest_records,
    stream_decode,
)
from bilingual_rnnt.model import AttentionConfig, ModelConfig, init_model

CFG = CorpusConfig(num_graphemes_a=3, num_graphemes_b=3, raw_dim=4)
COMBINED = language_tables(CFG)


class GridSession:
    """Stub session: log-probs read straight from a hand-built grid."""

    look_ahead = 0

    def __init__(self, grid, combined=COMBINED):
        self.grid = np.asarray(grid, dtype=np.float64)
        self.combined = combined

    @property
    def frames(self):
        return self.grid.shape[0]

    def initial_state(self):
        return 0

    def advance(self, state, k):
        return state + 1

    def logp(self, t, state):
        u = min(state, self.grid.shape[1] - 1)
        return self.grid[t, u]

    def weight_trajectory(self):
        return None


def make_grid(T, favored, K=COMBINED.size, peak=0.92):
    """Grid constant over t: favored[u] gets `peak`, blank gets the rest."""
    blank = COMBINED.blank_index
    U1 = len(favored)
    grid = np.zeros((T, U1, K))
    eps = 1e-6
    for u, fav in enumerate(favored):
        p = np.full(K, eps)
        if fav is None:
            p[blank] = 1.0
        else:
            p[fav] = peak
            p[blank] = 1.0 - peak
        p = p / p.sum()
        grid[:, u, :] = np.log(p)
    return grid


def test_greedy_all_blank_grid_empty_transcript():
    grid = make_grid(3, [None])
    res = greedy_decode(GridSession(grid))
    assert res.labels == ()
    assert res.words == []


def test_greedy_hand_grid_single_symbol():
    a0 = COMBINED.to_combined("A", COMBINED.table_a.index["a0"])
    grid = make_grid(2, [a0, None])
    res = greedy_decode(GridSession(grid))
    assert res.labels == (a0,)
    assert res.words == [("A", "a0")]


def test_beam_language_switch_in_one_hypothesis():
    b_a0 = COMBINED.to_combined("A", COMBINED.table_a.index["B_a0"])
    b_b1 = COMBINED.to_combined("B", COMBINED.table_b.index["B_b1"])
    grid = make_grid(4, [b_a0, b_b1, None])
    results = beam_search(GridSession(grid), beam_width=3, nbest=2)
    top = results[0]
    assert top.labels == (b_a0, b_b1)
    assert top.words == [("A", "a0"), ("B", "b1")]
    langs = {COMBINED.language_of(k) for k in top.labels}
    assert langs == {"A", "B"}


def test_beam_rejects_bad_width():
    grid = make_grid(2, [None])
    with pytest.raises(ValueError):
        beam_search(GridSession(grid), beam_width=0)


def test_nbest_scores_non_increasing():
    rng = np.random.default_rng(0)
    grid = np.log(rng.dirichlet(np.ones(COMBINED.size), size=(5, 4)))
    results = beam_search(GridSession(grid), beam_width=4, nbest=4)
    scores = [r.score for r in results]
    assert scores == sorted(scores, reverse=True)
    assert [r.rank for r in results] == list(range(len(results)))


def tiny_model(arch, seed=0, look_ahead=2):
    cfg = ModelConfig(
        architecture=arch,
        input_dim=CFG.stack * CFG.raw_dim,
        encoder_layers=1,
        encoder_hidden=8,
        prediction_layers=1,
        prediction_hidden=6,
        embed_dim=5,
        joint_hidden=7,
        attention=AttentionConfig(key_dim=4, ffn_hidden=4, look_ahead=look_ahead),
    )
    return init_model(cfg, COMBINED, seed)


@pytest.mark.parametrize("arch", ["vanilla", "multisoftmax", "multisoftmax_attn"])
@pytest.mark.parametrize("look", [0, 3, 10])
def test_stream_equals_offline(arch, look):
    m = tiny_model(arch, seed=look, look_ahead=look)
    u = synth_utterance(CFG, "mixed", seed=look + 40)
    offline = beam_search(m, u.features, beam_width=3, nbest=3)
    partials = list(stream_decode(m, u.features, beam_width=3, nbest=3))
    final = partials[-1]
    assert final.final
    assert [r.labels for r in final.results] == [r.labels for r in offline]
    assert [r.score for r in final.results] == [r.score for r in offline]
    assert final.results[0].words == offline[0].words


def test_stream_partials_respect_look_ahead():
    look = 3
    m = tiny_model("multisoftmax_attn", seed=1, look_ahead=look)
    u = synth_utterance(CFG, "A", seed=50)
    partials = list(stream_decode(m, u.features, beam_width=2))
    for p in partials[:-1]:
        assert p.frames_decoded == max(0, min(p.frames_consumed - look, u.num_frames))
    assert partials[-1].frames_decoded == u.num_frames


def test_stream_flush_handles_short_utterance():
    # whole utterance shorter than the look-ahead: everything decodes at flush
    m = tiny_model("multisoftmax_attn", seed=2, look_ahead=50)
    u = synth_utterance(CFG, "A", seed=51)
    assert u.num_frames < 50
    partials = list(stream_decode(m, u.features, beam_width=2))
    for p in partials[:-1]:
        assert p.frames_decoded == 0
    final = partials[-1]
    assert final.frames_decoded == u.num_frames
    offline = beam_search(m, u.features, beam_width=2)
    assert final.results[0].labels == offline[0].labels


def test_stream_rejects_infinite_look_ahead():
    m = tiny_model("multisoftmax_attn", seed=3, look_ahead=None)
    u = synth_utterance(CFG, "A", seed=52)
    with pytest.raises(ValueError):
        list(stream_decode(m, u.features))


def test_forced_unit_weights_emit_single_language_only():
    m = tiny_model("multisoftmax_attn", seed=4)
    for seed in range(5):
        u = synth_utterance(CFG, "mixed", seed=60 + seed)
        res = beam_search(m, u.features, beam_width=3, forced_weights=(1.0, 0.0))[0]
        assert all(int(k) in COMBINED.a_segment for k in res.labels)
        res_b = beam_search(m, u.features, beam_width=3, forced_weights=(0.0, 1.0))[0]
        assert all(int(k) in COMBINED.b_segment for k in res_b.labels)


def test_decode_determinism():
    m = tiny_model("multisoftmax_attn", seed=5)
    u = synth_utterance(CFG, "mixed", seed=70)
    r1 = beam_search(m, u.features, beam_width=4, nbest=4)
    r2 = beam_search(m, u.features, beam_width=4, nbest=4)
    assert [(r.labels, r.score) for r in r1] == [(r.labels, r.score) for r in r2]


def test_attention_trajectory_attached_to_results():
    m = tiny_model("multisoftmax_attn", seed=6)
    u = synth_utterance(CFG, "A", seed=71)
    res = beam_search(m, u.features, beam_width=2)[0]
    assert res.weights.shape == (u.num_frames, 2)
    np.testing.assert_allclose(res.weights.sum(axis=1), 1.0, atol=1e-9)
    res_v = beam_search(tiny_model("vanilla", seed=6), u.features, beam_width=2)[0]
    assert res_v.weights is None


def test_nbest_records_schema():
    res = DecodeResult(0, -1.5, (3,), [("A", "a0")], np.array([[0.6, 0.4]]))
    rows = nbest_records("utt-1", [res])
    assert rows[0]["id"] == "utt-1"
    assert rows[0]["transcript"] == ["a0"]
    assert rows[0]["language_tags"] == ["A"]
    assert rows[0]["attention_weights"] == [[0.6, 0.4]]


def test_smoothed_decode_still_streams_consistently():
    m = tiny_model("multisoftmax_attn", seed=7, look_ahead=2)
    u = synth_utterance(CFG, "mixed", seed=72)
    offline = beam_search(m, u.features, beam_width=3, smooth_alpha=0.5)
    final = list(stream_decode(m, u.features, beam_width=3, smooth_alpha=0.5))[-1]
    assert final.results[0].labels == offline[0].labels
    assert final.results[0].score == offline[0].score

"""Single beam search over the combined symbol set, with a streaming contract.

One decoding engine serves both entry points: frames are pushed into a
session one at a time, and frame t is decoded as soon as the attention
window (frames <= t+L) is available — immediately for architectures without
look-ahead. Offline decoding simply pushes the whole utterance and flushes,
so the streaming and offline results are identical by construction.

Hypotheses over the combined table may extend with symbols from either
language segment at any step, which is what lets a single beam switch
languages mid-utterance. Identical prefixes are merged by log-adding their
scores; ties break by score, then shorter prefix, then lower combined index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import _log_softmax_np
from .corpus import CombinedTable, detokenize
from .model import ArchitectureError, Model, attention_weights, combine_posteriors


@dataclass
class DecodeResult:
    rank: int
    score: float
    labels: tuple[int, ...]
    words: list[tuple[str, str]]
    weights: np.ndarray | None  # (T, 2) language weights, when applicable


@dataclass
class PartialTranscript:
    frames_consumed: int
    frames_decoded: int
    words: list[tuple[str, str]]
    final: bool = False
    results: list[DecodeResult] | None = None


@dataclass
class _Hyp:
    prefix: tuple[int, ...]
    score: float
    state: object


def _hyp_order(h: _Hyp):
    return (-h.score, len(h.prefix), h.prefix)


class ModelSession:
    """Incremental encoder + per-frame language weights + joint evaluation.

    The encoder steps through the same fused kernel as training (one frame
    at a time), so a partially fed session reproduces the full-utterance
    encoder outputs bit for bit.
    """

    def __init__(self, model: Model, forced_weights=None, look_ahead="config",
                 smooth_alpha: float | None = None):
        self.model = model
        self.combined: CombinedTable = model.combined
        self.arch = model.architecture
        self.params = {k: t.data for k, t in model.params.items()}
        if forced_weights is not None and self.arch == "vanilla":
            raise ArchitectureError("vanilla model has no language weights to force")
        self.forced_weights = forced_weights
        if self.arch == "multisoftmax_attn":
            self.look_ahead = (model.config.attention.look_ahead
                               if look_ahead == "config" else look_ahead)
        else:
            self.look_ahead = 0
        if smooth_alpha is not None and not 0.0 <= smooth_alpha <= 1.0:
            raise ValueError("smooth_alpha must lie in [0, 1]")
        self.smooth_alpha = smooth_alpha
        cfg = model.config
        self._enc_state = [
            (np.zeros(cfg.encoder_hidden), np.zeros(cfg.encoder_hidden))
            for _ in range(cfg.encoder_layers)
        ]
        self._h_enc: list[np.ndarray] = []
        self._weights: dict[int, tuple[float, float]] = {}

    # -- frames ---------------------------------------------------------

    def push_frame(self, frame: np.ndarray) -> None:
        x = np.asarray(frame, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != self.model.config.input_dim:
            raise ValueError(f"frame dim {x.shape[1]} != {self.model.config.input_dim}")
        for i in range(self.model.config.encoder_layers):
            h, c = self._enc_state[i]
            h_seq, c_seq, _ = kernels.lstm_seq_forward(
                x, h, c,
                self.params[f"encoder.{i}.wx"],
                self.params[f"encoder.{i}.wh"],
                self.params[f"encoder.{i}.b"],
            )
            self._enc_state[i] = (h_seq[0], c_seq[0])
            x = h_seq
        self._h_enc.append(x[0])

    @property
    def frames(self) -> int:
        return len(self._h_enc)

    # -- language weights -------------------------------------------------

    def weight(self, t: int) -> tuple[float, float] | None:
        """Weights used at frame t; must be queried in ascending t order
        (the smoothing recursion is causal)."""
        if self.arch == "vanilla":
            return None
        if t in self._weights:
            return self._weights[t]
        if self.forced_weights is not None:
            raw = tuple(self.forced_weights)
        elif self.arch == "multisoftmax":
            raw = (0.5, 0.5)
        else:
            h = np.asarray(self._h_enc)
            raw = attention_weights(self.model, h, t, self.look_ahead, self.params)
        if self.smooth_alpha is not None and t > 0:
            prev = self._weights[t - 1]
            a = self.smooth_alpha
            raw = (a * raw[0] + (1 - a) * prev[0], a * raw[1] + (1 - a) * prev[1])
        self._weights[t] = raw
        return raw

    def weight_trajectory(self) -> np.ndarray | None:
        if self.arch == "vanilla":
            return None
        return np.asarray([self._weights[t] for t in sorted(self._weights)])

    # -- prediction network ----------------------------------------------

    def initial_state(self):
        cfg = self.model.config
        layers = [
            (np.zeros(cfg.prediction_hidden), np.zeros(cfg.prediction_hidden))
            for _ in range(cfg.prediction_layers)
        ]
        return self._pred_feed(layers, self.combined.size - 1)  # start row

    def advance(self, state, k: int):
        layers, _ = state
        return self._pred_feed([(h.copy(), c.copy()) for h, c in layers], k)

    def _pred_feed(self, layers, embed_row: int):
        x = self.params["embed"][embed_row].reshape(1, -1)
        new_layers = []
        for i, (h, c) in enumerate(layers):
            h_seq, c_seq, _ = kernels.lstm_seq_forward(
                x, h, c,
                self.params[f"prediction.{i}.wx"],
                self.params[f"prediction.{i}.wh"],
                self.params[f"prediction.{i}.b"],
            )
            new_layers.append((h_seq[0], c_seq[0]))
            x = h_seq
        return tuple(new_layers), x[0]

    # -- joint -------------------------------------------------------------

    def _joint_np(self, prefix: str, h_enc_t: np.ndarray, h_pred: np.ndarray) -> np.ndarray:
        p = self.params
        hidden = np.tanh(
            h_enc_t @ p[f"{prefix}.w_enc"] + h_pred @ p[f"{prefix}.w_pred"] + p[f"{prefix}.b"]
        )
        return _log_softmax_np(hidden @ p[f"{prefix}.w_out"] + p[f"{prefix}.b_out"])

    def logp(self, t: int, state) -> np.ndarray:
        """Combined log-probs at frame t given a prediction state."""
        h_enc_t = self._h_enc[t]
        h_pred = state[1]
        if self.arch == "vanilla":
            return self._joint_np("joint", h_enc_t, h_pred)
        lp_a = self._joint_np("joint_A", h_enc_t, h_pred)
        lp_b = self._joint_np("joint_B", h_enc_t, h_pred)
        w_a, w_b = self.weight(t)
        return combine_posteriors(lp_a, lp_b, w_a, w_b, self.combined)


class StreamingDecoder:
    """Beam state over a session; decodes each frame once its window arrived."""

    def __init__(self, session, beam_width: int, nbest: int = 1,
                 max_symbols_per_frame: int = 5):
        if beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {beam_width}")
        self.session = session
        self.beam_width = beam_width
        self.nbest = nbest
        self.max_symbols = max_symbols_per_frame
        self.beam: list[_Hyp] = [_Hyp((), 0.0, session.initial_state())]
        self._states: dict[tuple, object] = {(): self.beam[0].state}
        self.next_frame = 0

    def push(self, frame) -> PartialTranscript:
        self.session.push_frame(frame)
        self._decode_ready(flush=False)
        return self._partial()

    def flush(self) -> list[DecodeResult]:
        self._decode_ready(flush=True)
        results = []
        traj = self.session.weight_trajectory()
        for rank, hyp in enumerate(sorted(self.beam, key=_hyp_order)[: self.nbest]):
            words = detokenize(self.session.combined, hyp.prefix)
            results.append(DecodeResult(rank, hyp.score, hyp.prefix, words, traj))
        return results

    # -- internals --------------------------------------------------------

    def _decode_ready(self, flush: bool) -> None:
        look = self.session.look_ahead
        while self.next_frame < self.session.frames:
            t = self.next_frame
            if not flush:
                if look is None:
                    return  # infinite look-ahead: only decodable at flush
                if self.session.frames < t + look + 1:
                    return
            self._step(t)
            self.next_frame = t + 1

    def _state_for(self, prefix: tuple) -> object:
        state = self._states.get(prefix)
        if state is None:
            parent = self._state_for(prefix[:-1])
            state = self.session.advance(parent, prefix[-1])
            self._states[prefix] = state
        return state

    def _step(self, t: int) -> None:
        blank = self.session.combined.blank_index
        active = self.beam
        finished: dict[tuple, float] = {}
        lp_cache: dict[tuple, np.ndarray] = {}
        for level in range(self.max_symbols + 1):
            # distinct candidate prefixes can never collide within a level
            # (equal parents would be required), so per-hyp top-k pruning is
            # exact; only blank-stopped prefixes need log-add merging
            candidates: list[tuple[tuple, float]] = []
            for hyp in active:
                lp = lp_cache.get(hyp.prefix)
                if lp is None:
                    lp = self.session.logp(t, hyp.state)
                    lp_cache[hyp.prefix] = lp
                bscore = hyp.score + lp[blank]
                if hyp.prefix in finished:
                    finished[hyp.prefix] = np.logaddexp(finished[hyp.prefix], bscore)
                else:
                    finished[hyp.prefix] = bscore
                if level < self.max_symbols:
                    nonblank = np.delete(np.arange(len(lp)), blank)
                    if len(nonblank) > self.beam_width:
                        part = np.argpartition(-lp[nonblank], self.beam_width - 1)
                        nonblank = nonblank[part[: self.beam_width]]
                    for k in nonblank:
                        if lp[k] == -math.inf:
                            continue
                        candidates.append((hyp.prefix + (int(k),), hyp.score + lp[k]))
            if not candidates or level == self.max_symbols:
                break
            ranked = sorted(
                candidates, key=lambda kv: (-kv[1], len(kv[0]), kv[0])
            )[: self.beam_width]
            active = [_Hyp(p, s, self._state_for(p)) for p, s in ranked]
        kept = sorted(finished.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))
        self.beam = [
            _Hyp(p, s, self._state_for(p)) for p, s in kept[: self.beam_width]
        ]
        # drop cached states for prefixes no beam member can extend again
        live = {h.prefix for h in self.beam}
        self._states = {
            p: st for p, st in self._states.items()
            if any(b[: len(p)] == p for b in live)
        }

    def _partial(self) -> PartialTranscript:
        best = min(self.beam, key=_hyp_order)
        return PartialTranscript(
            frames_consumed=self.session.frames,
            frames_decoded=self.next_frame,
            words=detokenize(self.session.combined, best.prefix),
        )


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def beam_search(model_or_session, features=None, beam_width: int = 4, nbest: int = 1,
                max_symbols_per_frame: int = 5, forced_weights=None,
                look_ahead="config", smooth_alpha=None) -> list[DecodeResult]:
    """Offline n-best decode: push every frame, then flush.

    Accepts a Model (with `features`) or a prebuilt session whose frames
    are supplied here.
    """
    session = _make_session(model_or_session, forced_weights, look_ahead, smooth_alpha)
    dec = StreamingDecoder(session, beam_width, nbest, max_symbols_per_frame)
    if features is not None:
        for frame in np.asarray(features, dtype=np.float64):
            session.push_frame(frame)
    return dec.flush()


def greedy_decode(model_or_session, features=None, max_symbols_per_frame: int = 5,
                  forced_weights=None, look_ahead="config") -> DecodeResult:
    """Locally greedy decode: repeatedly take the argmax symbol at each
    frame, emitting until blank wins (or the per-frame cap is reached)."""
    session = _make_session(model_or_session, forced_weights, look_ahead, None)
    if features is not None:
        for frame in np.asarray(features, dtype=np.float64):
            session.push_frame(frame)
    blank = session.combined.blank_index
    prefix: tuple[int, ...] = ()
    state = session.initial_state()
    score = 0.0
    for t in range(session.frames):
        emitted = 0
        while True:
            lp = session.logp(t, state)
            k = int(np.argmax(lp))
            score += lp[k]
            if k == blank:
                break
            prefix += (k,)
            state = session.advance(state, k)
            emitted += 1
            if emitted >= max_symbols_per_frame:
                score += session.logp(t, state)[blank]
                break
    words = detokenize(session.combined, prefix)
    return DecodeResult(0, score, prefix, words, session.weight_trajectory())


def stream_decode(model: Model, frames, beam_width: int = 4, nbest: int = 1,
                  max_symbols_per_frame: int = 5, smooth_alpha=None):
    """Generator over partial transcripts; the last yield carries the final
    n-best (identical to offline beam_search on the same frames).

    Requires a finite look-ahead for attention models: with infinite
    look-ahead the model is not streaming.
    """
    if model.architecture == "multisoftmax_attn" and model.config.attention.look_ahead is None:
        raise ValueError("streaming decode requires a finite look-ahead")
    session = ModelSession(model, smooth_alpha=smooth_alpha)
    dec = StreamingDecoder(session, beam_width, nbest, max_symbols_per_frame)
    for frame in frames:
        yield dec.push(frame)
    results = dec.flush()
    final = dec._partial()
    final.final = True
    final.words = results[0].words
    final.results = results
    yield final


def _make_session(model_or_session, forced_weights, look_ahead, smooth_alpha):
    if isinstance(model_or_session, Model):
        return ModelSession(model_or_session, forced_weights, look_ahead, smooth_alpha)
    return model_or_session


def nbest_records(utt_id: str, results: list[DecodeResult]) -> list[dict]:
    """JSON-ready rows: one per rank, with words, tags, and weights."""
    rows = []
    for r in results:
        rows.append({
            "id": utt_id,
            "rank": r.rank,
            "score": round(float(r.score), 10),
            "transcript": [text for _, text in r.words],
            "language_tags": [lang for lang, _ in r.words],
            "attention_weights": None if r.weights is None else
                [[round(float(w), 10) for w in pair] for pair in r.weights],
        })
    return rows

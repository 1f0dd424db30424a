"""Actor and critic networks: self-attention encoder, recurrent pointer decoder.

The encoder maps each variable's sample column to a state vector; the
decoder emits one variable per step through an additive-attention pointer
over the encoder states, masking already-chosen variables so every rollout
is a valid permutation.  The critic is a small feed-forward value head over
decoder input states.

There is no positional encoding: variable order in the input matrix is
arbitrary, and the encoder must be permutation-equivariant for the ordering
search to be well posed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Ordering


@dataclass(frozen=True)
class PolicyDims:
    """Network widths.  Defaults follow the reference architecture:
    3 encoder blocks of 8-head attention at model width 256 with a
    1024/256 feed-forward, a 256-unit recurrent pointer decoder, and a
    512/256/1 critic."""

    n_input: int
    d_model: int = 256
    n_heads: int = 8
    n_blocks: int = 3
    ff_hidden: int = 1024
    pointer_hidden: int = 256
    critic_hidden: tuple[int, int] = (512, 256)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _linear_params(rng, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    return _uniform(rng, fan_in, (fan_in, fan_out)), _uniform(rng, fan_in, (fan_out,))


def _ln_params(width: int) -> tuple[Tensor, Tensor]:
    return (
        Tensor(np.ones(width), requires_grad=True),
        Tensor(np.zeros(width), requires_grad=True),
    )


class PolicyParams:
    """All learnable tensors of encoder, decoder and critic, by name."""

    def __init__(self, dims: PolicyDims, rng: np.random.Generator):
        self.dims = dims
        p: dict[str, Tensor] = {}
        dm, ff, ph = dims.d_model, dims.ff_hidden, dims.pointer_hidden

        p["encoder.in.w"], p["encoder.in.b"] = _linear_params(rng, dims.n_input, dm)
        for blk in range(dims.n_blocks):
            pre = f"encoder.block{blk}"
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = _uniform(rng, dm, (dm, dm))
            p[f"{pre}.attn.bo"] = _uniform(rng, dm, (dm,))
            p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.shift"] = _ln_params(dm)
            p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"] = _linear_params(rng, dm, ff)
            p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"] = _linear_params(rng, ff, dm)
            p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.shift"] = _ln_params(dm)

        p["decoder.h0.w"], p["decoder.h0.b"] = _linear_params(rng, dm, dm)
        p["decoder.lstm.w"], p["decoder.lstm.b"] = _linear_params(rng, 2 * dm, 4 * dm)
        p["decoder.ptr.w1"], p["decoder.ptr.b1"] = _linear_params(rng, dm, ph)
        p["decoder.ptr.w2"] = _uniform(rng, dm, (dm, ph))
        p["decoder.ptr.v"] = _uniform(rng, ph, (ph, 1))

        c1, c2 = dims.critic_hidden
        p["critic.l1.w"], p["critic.l1.b"] = _linear_params(rng, dm, c1)
        p["critic.l2.w"], p["critic.l2.b"] = _linear_params(rng, c1, c2)
        p["critic.l3.w"], p["critic.l3.b"] = _linear_params(rng, c2, 1)

        self.tensors = p

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def actor(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("critic.")}

    def critic(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("critic.")}

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.tensors)

    def load_arrays(self, arrays: dict[str, np.ndarray], subset: str | None = None) -> None:
        """Overwrite parameter values in place; shapes must match exactly."""
        for name, tensor in self.tensors.items():
            if subset is not None and not name.startswith(subset):
                continue
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint shape {arrays[name].shape} for {name!r} does not "
                    f"match configured {tensor.data.shape}"
                )
            tensor.data = arrays[name].astype(np.float64).copy()

    @classmethod
    def from_checkpoint(cls, path, dims: PolicyDims) -> "PolicyParams":
        params = cls(dims, np.random.default_rng(0))
        params.load_arrays(ad.load_checkpoint(path))
        return params


def init_params(dims: PolicyDims, seed: int = 0) -> PolicyParams:
    return PolicyParams(dims, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Forward passes.

def _affine(x: Tensor, params: PolicyParams, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _layer_norm(x: Tensor, params: PolicyParams, name: str) -> Tensor:
    normed = ad.layer_norm_rows(x, eps=1e-6)
    return ad.add(ad.mul_rowvec(normed, params[f"{name}.gain"]), params[f"{name}.shift"])


def _attention(
    x: Tensor, params: PolicyParams, prefix: str, dims: PolicyDims,
    cross_mask: np.ndarray | None,
) -> Tensor:
    q = ad.matmul(x, params[f"{prefix}.wq"])
    k = ad.matmul(x, params[f"{prefix}.wk"])
    v = ad.matmul(x, params[f"{prefix}.wv"])
    head = dims.d_model // dims.n_heads
    scale = 1.0 / math.sqrt(head)
    outs = []
    for h in range(dims.n_heads):
        lo, hi = h * head, (h + 1) * head
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.mul_scalar(ad.matmul(qh, ad.transpose(kh)), scale)
        outs.append(ad.matmul(ad.softmax_rows(scores, mask=cross_mask), vh))
    merged = ad.concat(outs, axis=1)
    return ad.add(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def encode_batch(batches: list[np.ndarray], params: PolicyParams) -> Tensor:
    """Encode several n x d sample slices at once into a stacked (b*d) x d_model
    state matrix.  Episodes are independent: attention is restricted to each
    episode's own block of rows, so the result equals b separate encodes."""
    if not batches:
        raise ValueError("encode_batch needs at least one sample slice")
    dims = params.dims
    arrays = []
    for batch in batches:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2:
            raise ValueError(f"encoder input must be 2-D, got shape {batch.shape}")
        if not np.all(np.isfinite(batch)):
            raise ValueError("encoder input contains NaN or Inf")
        if batch.shape != (dims.n_input, batches[0].shape[1]):
            raise ValueError(
                f"encoder inputs must all be n_input={dims.n_input} x d, "
                f"got {batch.shape} vs {batches[0].shape}"
            )
        arrays.append(batch.T)  # one row per variable

    b, d = len(arrays), arrays[0].shape[0]
    cross_mask = None
    if b > 1:
        block = np.repeat(np.arange(b), d)
        cross_mask = block[:, None] != block[None, :]

    h = _affine(Tensor(np.vstack(arrays)), params, "encoder.in")
    for blk in range(dims.n_blocks):
        pre = f"encoder.block{blk}"
        attn = _attention(h, params, f"{pre}.attn", dims, cross_mask)
        h = _layer_norm(ad.add(h, attn), params, f"{pre}.ln1")
        hidden = ad.relu(ad.add(ad.matmul(h, params[f"{pre}.ff.w1"]), params[f"{pre}.ff.b1"]))
        ff = ad.add(ad.matmul(hidden, params[f"{pre}.ff.w2"]), params[f"{pre}.ff.b2"])
        h = _layer_norm(ad.add(h, ff), params, f"{pre}.ln2")
    return h


def encode(batch: np.ndarray, params: PolicyParams) -> Tensor:
    """Map an n x d sample slice to the d x d_model state matrix."""
    return encode_batch([np.asarray(batch, dtype=np.float64)], params)


def initial_state(states: Tensor) -> Tensor:
    """Mean of the encoder rows: the fixed pre-decision state (1 x d_model)."""
    return ad.mean_axis(states, axis=0)


def critic_value(state: Tensor, params: PolicyParams) -> Tensor:
    """Scalar baseline estimate for one decoder state (input detached)."""
    h = ad.relu(_affine(state, params, "critic.l1"))
    h = ad.relu(_affine(h, params, "critic.l2"))
    return ad.pick(_affine(h, params, "critic.l3"), 0, 0)


@dataclass
class BatchRolloutResult:
    """b orderings decoded in lockstep, with per-step tape tensors.

    Per decision step t: ``log_prob_matrices[t]`` is the (b, d) masked
    log-distribution, ``lp_chosen[t]`` the (b, 1) log-probability of the
    taken actions, ``entropy_nodes[t]`` the summed entropy over the batch,
    and ``step_states[t]`` the (b, d_model) decoder inputs s_hat_t.
    """

    orderings: list[Ordering]
    actions: np.ndarray  # (b, d)
    step_log_probs: np.ndarray  # (b, d) values of the chosen actions
    log_prob_matrices: list[Tensor]
    lp_chosen: list[Tensor]
    entropy_nodes: list[Tensor]
    step_states: list[Tensor]
    step_action_probs: list[np.ndarray]

    @property
    def b(self) -> int:
        return self.actions.shape[0]

    @property
    def d(self) -> int:
        return self.actions.shape[1]


@dataclass
class RolloutResult:
    """One decoded ordering with everything needed to build the losses.

    ``log_prob_nodes`` and ``entropy_node`` stay attached to the tape so a
    policy-gradient loss can be assembled after rewards are known;
    ``step_states`` holds the decoder input states s_hat_0..s_hat_T.
    """

    ordering: Ordering
    step_log_probs: np.ndarray
    log_prob_nodes: list[Tensor]
    entropy: float
    entropy_node: Tensor
    step_states: list[Tensor]
    step_action_probs: list[np.ndarray]


def rollout_batch(
    states_all: Tensor,
    b: int,
    params: PolicyParams,
    mode: str = "Sample",
    rng: np.random.Generator | None = None,
    forced_actions: np.ndarray | None = None,
) -> BatchRolloutResult:
    """Decode b independent orderings from stacked encoder states.

    ``states_all`` is the (b*d, d_model) output of :func:`encode_batch`;
    episode i owns rows i*d..(i+1)*d-1.  Sample draws from each pointer
    distribution, Greedy takes the argmax, Forced follows the given (b, d)
    action matrix while still recording its log-probabilities.
    """
    if mode not in ("Sample", "Greedy", "Forced"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "Sample" and rng is None:
        raise ValueError("Sample mode needs an RNG")
    if states_all.shape[0] % b:
        raise ValueError(f"{states_all.shape[0]} state rows not divisible by b={b}")
    d = states_all.shape[0] // b
    if mode == "Forced":
        forced_actions = np.asarray(forced_actions, dtype=int)
        if forced_actions.shape != (b, d):
            raise ValueError(f"Forced mode needs a ({b},{d}) action matrix")
    dims = params.dims

    s0 = ad.mean_groups(states_all, d)  # (b, d_model) initial states
    h = _affine(s0, params, "decoder.h0")
    c = Tensor(np.zeros((b, dims.d_model)))
    ptr_keys = ad.add(
        ad.matmul(states_all, params["decoder.ptr.w1"]), params["decoder.ptr.b1"]
    )

    mask = np.zeros((b, d), dtype=bool)
    actions = np.zeros((b, d), dtype=int)
    log_prob_matrices: list[Tensor] = []
    lp_chosen: list[Tensor] = []
    entropy_nodes: list[Tensor] = []
    step_states: list[Tensor] = [s0]
    step_action_probs: list[np.ndarray] = []
    step_input = s0
    row_offset = np.arange(b) * d

    for step in range(d):
        h, c = _lstm_step(step_input, h, c, params, dims)
        query = ad.repeat_rows(ad.matmul(h, params["decoder.ptr.w2"]), d)
        logits = ad.reshape(
            ad.matmul(ad.tanh(ad.add(ptr_keys, query)), params["decoder.ptr.v"]), (b, d)
        )
        log_probs = ad.masked_log_softmax(logits, mask)
        probs = np.where(mask, 0.0, np.exp(log_probs.data))
        if mode == "Greedy":
            chosen = np.argmax(np.where(mask, -np.inf, log_probs.data), axis=1)
        elif mode == "Forced":
            chosen = forced_actions[:, step]
        else:
            chosen = np.array(
                [rng.choice(d, p=probs[i] / probs[i].sum()) for i in range(b)]
            )
        assert not mask[np.arange(b), chosen].any(), "pointer selected a masked variable"

        actions[:, step] = chosen
        log_prob_matrices.append(log_probs)
        lp_chosen.append(ad.pick_per_row(log_probs, chosen))
        entropy_nodes.append(ad.entropy_from_log_probs(log_probs, mask))
        step_action_probs.append(probs)
        mask = mask.copy()
        mask[np.arange(b), chosen] = True
        step_input = ad.gather_rows(states_all, row_offset + chosen)
        step_states.append(step_input)

    return BatchRolloutResult(
        orderings=[Ordering(tuple(row)) for row in actions],
        actions=actions,
        step_log_probs=np.column_stack([t.data[:, 0] for t in lp_chosen]),
        log_prob_matrices=log_prob_matrices,
        lp_chosen=lp_chosen,
        entropy_nodes=entropy_nodes,
        step_states=step_states[:-1],  # inputs at decision steps 0..T
        step_action_probs=step_action_probs,
    )


def rollout(
    states: Tensor,
    params: PolicyParams,
    mode: str = "Sample",
    rng: np.random.Generator | None = None,
    forced_actions: list[int] | None = None,
) -> RolloutResult:
    """Decode a full ordering (single-episode view of :func:`rollout_batch`)."""
    d = states.shape[0]
    forced = None
    if forced_actions is not None:
        forced = np.asarray(forced_actions, dtype=int).reshape(1, -1)
    batch = rollout_batch(states, 1, params, mode=mode, rng=rng, forced_actions=forced)
    log_prob_nodes = [ad.reshape(t, ()) for t in batch.lp_chosen]
    entropy_node = ad.weighted_sum(batch.entropy_nodes, np.ones(d))
    return RolloutResult(
        ordering=batch.orderings[0],
        step_log_probs=batch.step_log_probs[0],
        log_prob_nodes=log_prob_nodes,
        entropy=float(entropy_node.data),
        entropy_node=entropy_node,
        step_states=batch.step_states,
        step_action_probs=[p[0] for p in batch.step_action_probs],
    )


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, params: PolicyParams, dims: PolicyDims):
    dm = dims.d_model
    z = ad.add(
        ad.matmul(ad.concat([x, h], axis=1), params["decoder.lstm.w"]),
        params["decoder.lstm.b"],
    )
    i = ad.sigmoid(ad.slice_cols(z, 0, dm))
    f = ad.sigmoid(ad.slice_cols(z, dm, 2 * dm))
    g = ad.tanh(ad.slice_cols(z, 2 * dm, 3 * dm))
    o = ad.sigmoid(ad.slice_cols(z, 3 * dm, 4 * dm))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new

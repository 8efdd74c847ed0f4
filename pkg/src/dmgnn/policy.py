"""Policy architectures: FNN, FNN-REF, HFNN, HGNN and UHGNN.

Every policy maps a batch of featurised states to masked action logits and
Q-values with a shared trunk and twin heads.  DIP-based policies use the
active domain's action space (one summary action per slot followed by the
general system intents); FNN-REF uses the composite-action catalogue over
the whole multi-domain space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nncore as nn
from .belief import BeliefState
from .catalogue import Catalogue, load_catalogue
from .dialogue import DialogueAct
from .featurize import (
    DipState,
    FlatState,
    action_space,
    dip_state,
    flat_layout,
    flat_state,
    independent_dim,
    padded_dip,
    slot_dim,
    summary_of,
    to_master,
)
from .ontology import Ontology

POLICY_KINDS = ("FNN", "FNN-REF", "HFNN", "HGNN", "UHGNN")
FNN_HIDDEN = 128
GNN_HIDDEN = 32


@dataclass
class PolicyOutput:
    logits: nn.Tensor
    q: nn.Tensor
    mask: np.ndarray

    def log_probs(self) -> nn.Tensor:
        return nn.masked_log_softmax(self.logits, self.mask)

    def probs(self) -> np.ndarray:
        return nn.softmax(self.logits.data, self.mask)


class MLP(nn.Module):
    """Two relu hidden layers with dropout and twin linear heads (logits, Q)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, hidden: int = FNN_HIDDEN):
        self.fc1 = nn.Linear(n_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, hidden, rng)
        self.pi = nn.Linear(hidden, n_out, rng)
        self.q = nn.Linear(hidden, n_out, rng)

    def __call__(self, x: nn.Tensor, dropout: float, train: bool, rng) -> tuple[nn.Tensor, nn.Tensor]:
        h = nn.dropout(nn.relu(self.fc1(x)), dropout, rng, train)
        h = nn.dropout(nn.relu(self.fc2(h)), dropout, rng, train)
        return self.pi(h), self.q(h)


class GnnParams(nn.Module):
    """Slot (S) and slot-independent (I) node embedders, typed relations and heads.

    All slot nodes share one embedder, the relation matrices and the slot
    heads, so the parameter count does not depend on the number of slots.
    """

    def __init__(self, ind_dim: int, slot_dim_: int, n_general: int, rng: np.random.Generator,
                 hidden: int = GNN_HIDDEN):
        bound = 1.0 / np.sqrt(hidden)
        self.embed_s = nn.Linear(slot_dim_, hidden, rng)
        self.embed_i = nn.Linear(ind_dim, hidden, rng)
        self.s2s = nn.parameter(rng.uniform(-bound, bound, (hidden, hidden)))
        self.s2i = nn.parameter(rng.uniform(-bound, bound, (hidden, hidden)))
        self.i2s = nn.parameter(rng.uniform(-bound, bound, (hidden, hidden)))
        self.pi_slot = nn.Linear(hidden, 2, rng)
        self.pi_general = nn.Linear(hidden, n_general, rng)
        self.q_slot = nn.Linear(hidden, 2, rng)
        self.q_general = nn.Linear(hidden, n_general, rng)

    def __call__(self, x_ind: np.ndarray, x_slots: np.ndarray, slot_mask: np.ndarray,
                 head_col: np.ndarray, dropout: float, train: bool, rng):
        """Returns (slot logits, general logits, slot Q, general Q).

        ``x_slots`` is (B, N, slot_dim) zero-padded; ``slot_mask`` (B, N) marks
        real slots; ``head_col`` (B, N) picks the request (0) or inform (1)
        output of each slot head.
        """
        m = slot_mask.astype(float)[..., None]
        n = slot_mask.sum(axis=1).astype(float)
        h_s = nn.mul(nn.relu(self.embed_s(nn.Tensor(x_slots))), m)
        h_i = nn.relu(self.embed_i(nn.Tensor(x_ind)))
        h_s = nn.dropout(h_s, dropout, rng, train)
        h_i = nn.dropout(h_i, dropout, rng, train)

        total = nn.sum(h_s, axis=1, keepdims=True)
        # mean over the other slots; single-slot domains receive a zero message
        inv_others = np.where(n > 1, 1.0 / np.maximum(n - 1, 1), 0.0)[:, None, None]
        others = nn.mul(nn.add(total, nn.neg(h_s)), inv_others * m)
        msg = nn.add(nn.matmul(others, self.s2s), nn.reshape(nn.matmul(h_i, self.i2s), (len(n), 1, -1)))
        h_s1 = nn.mul(nn.relu(nn.add(msg, h_s)), m)
        mean_s = nn.mul(nn.reshape(total, (len(n), -1)), (1.0 / np.maximum(n, 1))[:, None])
        h_i1 = nn.relu(nn.add(nn.matmul(mean_s, self.s2i), h_i))
        h_s1 = nn.dropout(h_s1, dropout, rng, train)
        h_i1 = nn.dropout(h_i1, dropout, rng, train)

        col = head_col[..., None]
        shape = head_col.shape
        slot_pi = nn.reshape(nn.gather(self.pi_slot(h_s1), col), shape)
        slot_q = nn.reshape(nn.gather(self.q_slot(h_s1), col), shape)
        return slot_pi, self.pi_general(h_i1), slot_q, self.q_general(h_i1)


class Policy(nn.Module):
    kind = ""

    def __init__(self, ontology: Ontology, dropout: float = 0.1):
        self._ontology = ontology
        self._dropout = dropout

    @property
    def ontology(self) -> Ontology:
        return self._ontology

    def featurize(self, belief: BeliefState, domain: str):
        return dip_state(belief, domain, self._ontology)

    def action_for_acts(self, acts: Sequence[DialogueAct], domain: str) -> int:
        """Index of the summary action the teacher's (first) act corresponds to."""
        return action_space(self._ontology, domain).index(summary_of(acts[0]))

    def realize(self, index: int, belief: BeliefState, domain: str) -> list[DialogueAct]:
        space = action_space(self._ontology, domain)
        if index >= len(space):
            raise ValueError(f"action index {index} outside the {domain} action space")
        return to_master(space.actions[index], belief, domain)

    def evaluate(self, batch: Sequence, train: bool = False, rng=None) -> PolicyOutput:
        raise NotImplementedError

    # helpers shared by the DIP policies
    def _layout(self, domains: Sequence[str]) -> tuple[int, np.ndarray]:
        spaces = [action_space(self._ontology, d) for d in domains]
        width = max(len(s) for s in spaces)
        mask = np.zeros((len(spaces), width), dtype=bool)
        for i, s in enumerate(spaces):
            mask[i, :len(s)] = s.mask
        return width, mask

    def _grouped(self, batch: Sequence[DipState], fn, train, rng) -> PolicyOutput:
        """Run ``fn(domain, items)`` per domain group and reassemble in batch order."""
        width, mask = self._layout([f.domain for f in batch])
        groups: dict[str, list[int]] = {}
        for i, f in enumerate(batch):
            groups.setdefault(f.domain, []).append(i)
        logits, qs, order = [], [], []
        for d, idx in groups.items():
            lg, q = fn(d, [batch[i] for i in idx], train, rng)
            logits.append(nn.pad_last(lg, width))
            qs.append(nn.pad_last(q, width))
            order.extend(idx)
        if len(groups) == 1:
            return PolicyOutput(logits[0], qs[0], mask)
        inv = np.argsort(np.array(order))
        return PolicyOutput(nn.take_rows(nn.concat(logits, 0), inv),
                            nn.take_rows(nn.concat(qs, 0), inv), mask)


class FNNPolicy(Policy):
    """One network over the active domain's DIP vectors, padded to the largest domain."""

    kind = "FNN"

    def __init__(self, ontology: Ontology, rng: np.random.Generator, dropout: float = 0.1):
        super().__init__(ontology, dropout)
        self._max_slots = ontology.max_slots
        self._n_general = len(ontology.general_system_intents)
        n_in = independent_dim(ontology) + self._max_slots * slot_dim(ontology)
        self.net = MLP(n_in, self._max_slots + self._n_general, rng)

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        x = np.stack([padded_dip(f, self._max_slots) for f in batch])
        lg, q = self.net(nn.Tensor(x), self._dropout, train, rng)
        width, mask = self._layout([f.domain for f in batch])
        index = np.zeros((len(batch), width), dtype=np.intp)
        for i, f in enumerate(batch):
            n = f.slots.shape[0]
            row = list(range(n)) + list(range(self._max_slots, self._max_slots + self._n_general))
            index[i, :len(row)] = row
        return PolicyOutput(nn.gather(lg, index), nn.gather(q, index), mask)


class HFNNPolicy(Policy):
    """One FNN per domain, each sized to its own domain; the tracker picks which one acts."""

    kind = "HFNN"

    def __init__(self, ontology: Ontology, rng: np.random.Generator, dropout: float = 0.1):
        super().__init__(ontology, dropout)
        n_gen = len(ontology.general_system_intents)
        self.nets = {
            d.name: MLP(independent_dim(ontology) + len(d.slots) * slot_dim(ontology),
                        len(d.slots) + n_gen, rng)
            for d in ontology.domains
        }

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        def run(domain, items, train, rng):
            x = np.stack([np.concatenate([f.independent, f.slots.ravel()]) for f in items])
            return self.nets[domain](nn.Tensor(x), self._dropout, train, rng)

        return self._grouped(batch, run, train, rng)


def _gnn_inputs(ontology: Ontology, items: Sequence[DipState]):
    n_max = max(f.slots.shape[0] for f in items)
    b = len(items)
    k = items[0].slots.shape[1]
    x_slots = np.zeros((b, n_max, k))
    slot_mask = np.zeros((b, n_max), dtype=bool)
    head_col = np.zeros((b, n_max), dtype=np.intp)
    for i, f in enumerate(items):
        n = f.slots.shape[0]
        x_slots[i, :n] = f.slots
        slot_mask[i, :n] = True
        head_col[i, :n] = _head_cols(ontology, f.domain)
    x_ind = np.stack([f.independent for f in items])
    return x_ind, x_slots, slot_mask, head_col, n_max


_HEAD_COLS: dict[tuple[int, str], np.ndarray] = {}


def _head_cols(ontology: Ontology, domain: str) -> np.ndarray:
    key = (id(ontology), domain)
    if key not in _HEAD_COLS:
        _HEAD_COLS[key] = np.array([0 if s.is_constraint else 1 for s in ontology.domain(domain).slots],
                                   dtype=np.intp)
    return _HEAD_COLS[key]


def _gnn_output(ontology, gnn: GnnParams, items, dropout, train, rng, width=None):
    x_ind, x_slots, slot_mask, head_col, n_max = _gnn_inputs(ontology, items)
    sp, gp, sq, gq = gnn(x_ind, x_slots, slot_mask, head_col, dropout, train, rng)
    lg = nn.concat([sp, gp], axis=1)
    q = nn.concat([sq, gq], axis=1)
    n_gen = gp.shape[1]
    sizes = [f.slots.shape[0] for f in items]
    if all(s == n_max for s in sizes):
        return lg, q
    width = width or (max(sizes) + n_gen)
    index = np.zeros((len(items), width), dtype=np.intp)
    for i, n in enumerate(sizes):
        row = list(range(n)) + list(range(n_max, n_max + n_gen))
        index[i, :len(row)] = row
    return nn.gather(lg, index), nn.gather(q, index)


class HGNNPolicy(Policy):
    """One GNN per domain, selected by the tracker's active domain."""

    kind = "HGNN"

    def __init__(self, ontology: Ontology, rng: np.random.Generator, dropout: float = 0.1):
        super().__init__(ontology, dropout)
        n_gen = len(ontology.general_system_intents)
        self.gnns = {d.name: GnnParams(independent_dim(ontology), slot_dim(ontology), n_gen, rng)
                     for d in ontology.domains}

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        def run(domain, items, train, rng):
            return _gnn_output(self._ontology, self.gnns[domain], items, self._dropout, train, rng)

        return self._grouped(batch, run, train, rng)


class UHGNNPolicy(Policy):
    """A single GNN shared by every domain."""

    kind = "UHGNN"

    def __init__(self, ontology: Ontology, rng: np.random.Generator, dropout: float = 0.1):
        super().__init__(ontology, dropout)
        n_gen = len(ontology.general_system_intents)
        self.gnn = GnnParams(independent_dim(ontology), slot_dim(ontology), n_gen, rng)

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        width, mask = self._layout([f.domain for f in batch])
        lg, q = _gnn_output(self._ontology, self.gnn, batch, self._dropout, train, rng, width)
        if lg.shape[1] < width:
            lg, q = nn.pad_last(lg, width), nn.pad_last(q, width)
        return PolicyOutput(lg, q, mask)


class FNNRefPolicy(Policy):
    """Flat (native) state over all domains, composite multi-domain actions."""

    kind = "FNN-REF"

    def __init__(self, ontology: Ontology, rng: np.random.Generator, dropout: float = 0.1,
                 catalogue: Catalogue | None = None):
        super().__init__(ontology, dropout)
        self._catalogue = catalogue if catalogue is not None else load_catalogue(ontology)
        self.net = MLP(flat_layout(ontology).dim, len(self._catalogue), rng)

    @property
    def catalogue(self) -> Catalogue:
        return self._catalogue

    def featurize(self, belief, domain):
        return FlatState(domain, flat_state(belief, self._ontology))

    def action_for_acts(self, acts, domain):
        return self._catalogue.index_for(acts, domain)

    def realize(self, index, belief, domain):
        return self._catalogue.expand(index, belief)

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        x = np.stack([f.vector for f in batch])
        lg, q = self.net(nn.Tensor(x), self._dropout, train, rng)
        return PolicyOutput(lg, q, np.ones(lg.shape, dtype=bool))


_KINDS = {
    "FNN": FNNPolicy,
    "FNN-REF": FNNRefPolicy,
    "HFNN": HFNNPolicy,
    "HGNN": HGNNPolicy,
    "UHGNN": UHGNNPolicy,
}


def make_policy(kind: str, ontology: Ontology, seed, dropout: float = 0.1) -> Policy:
    """Build a freshly initialised policy (uniform in +-1/sqrt(fan_in))."""
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return cls(ontology, rng, dropout)


def parameter_table(policy: Policy) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, p.shape, int(p.data.size)) for name, p in policy.named_parameters()]


def gnn_forward(params: GnnParams, dip: DipState, ontology: Ontology, train: bool = False,
                rng=None, dropout: float = 0.0) -> PolicyOutput:
    """Single-state GNN pass in the domain's action-space order, mask applied."""
    if dip.slots.shape[0] == 0:
        raise ValueError("the GNN needs at least one slot node")
    lg, q = _gnn_output(ontology, params, [dip], dropout, train, rng)
    return PolicyOutput(lg, q, action_space(ontology, dip.domain).mask[None, :].copy())

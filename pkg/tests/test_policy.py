import copy
import itertools

import numpy as np
import pytest

from dmgnn import nncore as nn
from dmgnn.belief import initial_belief, update
from dmgnn.catalogue import MAX_COMPOSITE, build_catalogue, load_catalogue
from dmgnn.dialogue import DialogueAct
from dmgnn.featurize import action_space, dip_state, independent_dim, slot_dim
from dmgnn.learn import select_action
from dmgnn.ontology import from_document, load_ontology, to_document
from dmgnn.policy import POLICY_KINDS, GnnParams, gnn_forward, make_policy, parameter_table


def count(policy):
    return sum(n for _, _, n in parameter_table(policy))


def _relu(x):
    return np.maximum(x, 0.0)


def reference_gnn(g: GnnParams, x_ind, x_slots, head_col):
    """Plain numpy forward of one state, written slot by slot."""
    lin = lambda layer, x: x @ layer.weight.data + layer.bias.data
    h_s = [_relu(lin(g.embed_s, x)) for x in x_slots]
    h_i = _relu(lin(g.embed_i, x_ind))
    n = len(h_s)
    new_s = []
    for s in range(n):
        others = [h_s[t] @ g.s2s.data for t in range(n) if t != s]
        msg = np.mean(others, axis=0) if others else np.zeros_like(h_i)
        new_s.append(_relu(msg + h_i @ g.i2s.data + h_s[s]))
    new_i = _relu(np.mean([h @ g.s2i.data for h in h_s], axis=0) + h_i)
    slot_pi = [lin(g.pi_slot, h)[c] for h, c in zip(new_s, head_col)]
    return np.array(slot_pi), lin(g.pi_general, new_i)


def test_gnn_matches_reference(onto):
    g = make_policy("UHGNN", onto, 3).gnn
    rng = np.random.default_rng(0)
    b = update(initial_belief(onto), [DialogueAct("inform", "restaurant", "food", "thai"),
                                      DialogueAct("request", "restaurant", "phone")])
    for d in ("restaurant", "police", "hospital"):
        dip = dip_state(b, d)
        dip = type(dip)(d, rng.integers(0, 2, dip.independent.shape).astype(float),
                        rng.integers(0, 2, dip.slots.shape).astype(float), dip.slot_names)
        out = gnn_forward(g, dip, onto)
        cols = [0 if onto.domain(d).slot(s).is_constraint else 1 for s in dip.slot_names]
        sp, gp = reference_gnn(g, dip.independent, dip.slots, cols)
        np.testing.assert_allclose(out.logits.data[0], np.concatenate([sp, gp]), atol=1e-12)


def test_permutation_equivariance(onto):
    g = make_policy("UHGNN", onto, 5).gnn
    rng = np.random.default_rng(1)
    x_ind = rng.random((1, 19))
    x_slots = rng.random((1, 3, 7))
    cols = np.array([[0, 0, 1]])
    mask = np.ones((1, 3), dtype=bool)
    sp, gp, sq, gq = (t.data for t in g(x_ind, x_slots, mask, cols, 0.0, False, None))
    for perm in itertools.permutations(range(3)):
        p = list(perm)
        sp2, gp2, sq2, gq2 = (t.data for t in g(x_ind, x_slots[:, p], mask, cols[:, p], 0.0, False, None))
        np.testing.assert_allclose(sp2, sp[:, p], atol=1e-12)
        np.testing.assert_allclose(sq2, sq[:, p], atol=1e-12)
        np.testing.assert_allclose(gp2, gp, atol=1e-12)
        np.testing.assert_allclose(gq2, gq, atol=1e-12)


def test_gnn_param_count_enumerated(onto):
    g = make_policy("UHGNN", onto, 0).gnn
    h = 32
    expected = (7 * h + h) + (19 * h + h) + 3 * h * h + 2 * (h * 2 + 2) + 2 * (h * 6 + 6)
    assert sum(p.data.size for _, p in g.named_parameters()) == expected == 4496


def test_gnn_count_independent_of_slots(onto):
    r = make_policy("HGNN", onto, 0)
    sizes = {sum(p.data.size for _, p in g.named_parameters()) for g in r.gnns.values()}
    assert len(sizes) == 1
    assert len(onto.domain("restaurant").slots) != len(onto.domain("hospital").slots)


def test_fnn_param_formula(onto):
    d = independent_dim(onto) + onto.max_slots * slot_dim(onto)
    a = onto.max_slots + len(onto.general_system_intents)
    assert count(make_policy("FNN", onto, 0)) == d * 128 + 128 + 128 * 128 + 128 + 2 * (128 * a + a)


def test_hfnn_one_net_per_domain(onto):
    p = make_policy("HFNN", onto, 0)
    assert set(p.nets) == set(onto.domain_names)
    for name, net in p.nets.items():
        dom = onto.domain(name)
        assert net.fc1.weight.shape == (19 + 7 * len(dom.slots), 128)
        assert net.pi.weight.shape == (128, len(dom.slots) + 6)


def _with_extra_domain(onto):
    doc = copy.deepcopy(to_document(onto))
    extra = copy.deepcopy(doc["domains"][0])
    extra["name"] = "spa"
    for e in extra["database"]:
        e["name"] = "spa " + e["name"]
    doc["domains"].append(extra)
    return from_document(doc)


def test_weight_sharing_counts(onto):
    one = count(make_policy("UHGNN", onto, 0))
    two = onto.restrict(["restaurant", "hotel"])
    eight = _with_extra_domain(onto)
    assert count(make_policy("UHGNN", two, 0)) == one == count(make_policy("UHGNN", eight, 0))
    assert count(make_policy("HGNN", onto, 0)) == 7 * one
    assert count(make_policy("HGNN", two, 0)) == 2 * one
    assert count(make_policy("HGNN", eight, 0)) - count(make_policy("HGNN", onto, 0)) == one


def test_unknown_kind(onto):
    with pytest.raises(ValueError):
        make_policy("CNN", onto, 0)


def test_init_bounds_and_seed(onto):
    a = make_policy("FNN", onto, 4)
    b = make_policy("FNN", onto, 4)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    w = a.net.fc1.weight.data
    assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_outputs_align_with_action_space(onto, kind):
    pol = make_policy(kind, onto, 0)
    b = initial_belief(onto)
    doms = list(onto.domain_names)
    out = pol.evaluate([pol.featurize(b, d) for d in doms])
    for i, d in enumerate(doms):
        p = nn.softmax(out.logits.data[i], out.mask[i])
        assert abs(p.sum() - 1) < 1e-12
        assert np.all(p[~out.mask[i]] == 0.0)
        if kind != "FNN-REF":
            sp = action_space(onto, d)
            assert out.mask[i, :len(sp)].tolist() == sp.mask.tolist()
            assert not out.mask[i, len(sp):].any()
    # a mixed batch matches the per-state outputs
    for i, d in enumerate(doms):
        single = pol.evaluate([pol.featurize(b, d)])
        np.testing.assert_allclose(single.logits.data[0], out.logits.data[i][:single.logits.shape[1]], atol=1e-12)


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_argmax_invariant_to_masked_logits(onto, kind):
    pol = make_policy(kind, onto, 2)
    out = pol.evaluate([pol.featurize(initial_belief(onto), "police")])
    idx, _ = select_action(out, None, "greedy")
    out.logits.data[~out.mask] = 1e9
    assert select_action(out, None, "greedy")[0] == idx


def test_uhgnn_gradients_are_shared(onto):
    pol = make_policy("UHGNN", onto, 0)
    params = dict(pol.named_parameters())
    b = initial_belief(onto)
    grads = {}
    for d in ("restaurant", "hotel"):
        for p in params.values():
            p.grad = None
        out = pol.evaluate([pol.featurize(b, d)])
        nn.sum(nn.mul(out.logits, out.mask.astype(float))).backward()
        grads[d] = {n: p for n, p in params.items() if p.grad is not None and np.any(p.grad != 0)}
    shared = set(grads["restaurant"]) & set(grads["hotel"])
    assert "gnn.s2s" in shared and "gnn.embed_s.weight" in shared
    for n in shared:
        assert grads["restaurant"][n] is grads["hotel"][n] is params[n]


def test_hgnn_gradients_stay_in_domain(onto):
    pol = make_policy("HGNN", onto, 0)
    out = pol.evaluate([pol.featurize(initial_belief(onto), "restaurant")])
    nn.sum(nn.mul(out.logits, out.mask.astype(float))).backward()
    for n, p in pol.named_parameters():
        touched = p.grad is not None and np.any(p.grad != 0)
        if not n.startswith("gnns.restaurant."):
            assert not touched, n


def test_catalogue_valid_and_sizes():
    onto = load_ontology()
    cat = load_catalogue(onto)
    cat.validate(onto)
    assert all(1 <= len(e) <= MAX_COMPOSITE for e in cat.entries)
    assert len(set(cat.entries)) == len(cat.entries)
    b = initial_belief(onto)
    for i in range(len(cat)):
        assert cat.expand(i, b)


def test_catalogue_generation_deterministic():
    two = load_ontology().restrict(["restaurant", "hotel"])
    a = build_catalogue(two, dialogues=200, seed=3)
    b = build_catalogue(two, dialogues=200, seed=3)
    assert a == b and len(a) > 0


@pytest.mark.slow
def test_bundled_catalogue_matches_rebuild():
    onto = load_ontology()
    assert build_catalogue(onto) == load_catalogue(onto)

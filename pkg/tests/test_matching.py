"""Assignment optimality and the multi-task detection loss."""

import itertools

import numpy as np
import pytest
import torch

from hoidet.data import (
    HOIInstance,
    ImageAnnotation,
    default_vocabulary,
    gt_oa_targets,
)
from hoidet.geometry import Box
from hoidet.heads import PredictionSet
from hoidet.matching import (
    LossWeights,
    build_targets,
    detection_loss,
    hungarian,
    image_loss,
    match_cost,
)


def _brute_force_min(cost):
    """Exhaustive minimum over injective row->column maps."""
    n, m = cost.shape
    best = None
    for cols in itertools.permutations(range(m), n):
        total = sum(cost[i, c] for i, c in enumerate(cols))
        if best is None or total < best:
            best = total
    return best


def _logit(p):
    return float(np.log(p / (1 - p)))


def _prediction(human_boxes, object_boxes, obj_probs, hoi_probs, oa=None):
    """PredictionSet from target probabilities (logits recovered by inversion)."""
    def box_logits(rows):
        arr = torch.tensor(rows, dtype=torch.float64)
        return torch.log(arr / (1 - arr))

    obj = torch.log(torch.tensor(obj_probs, dtype=torch.float64))
    hoi = torch.tensor([[_logit(p) for p in row] for row in hoi_probs],
                       dtype=torch.float64)
    return PredictionSet(
        boxes_human=torch.sigmoid(box_logits(human_boxes)),
        boxes_object=torch.sigmoid(box_logits(object_boxes)),
        obj_logits=obj,
        hoi_logits=hoi,
        oa_scores=None if oa is None else torch.tensor(oa, dtype=torch.float64))


def _ann(instances, image_id="im0"):
    return ImageAnnotation(image_id=image_id,
                           pixels=np.zeros((8, 8, 3), dtype=np.uint8),
                           hois=instances)


# --- hungarian ---------------------------------------------------------------


def test_hungarian_two_by_two_fixture():
    assert hungarian([[1.0, 2.0], [3.0, 0.0]]) == [0, 1]


def test_hungarian_prefers_off_diagonal_when_cheaper():
    assert hungarian([[10.0, 1.0], [1.0, 10.0]]) == [1, 0]


def test_hungarian_diagonal_dominant():
    cost = np.full((4, 4), 5.0)
    np.fill_diagonal(cost, 0.0)
    assert hungarian(cost) == [0, 1, 2, 3]


def test_hungarian_empty_and_errors():
    assert hungarian(np.zeros((0, 4))) == []
    with pytest.raises(ValueError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        hungarian(np.array([[np.inf, 1.0]]))
    with pytest.raises(ValueError):
        hungarian(np.zeros(4))


def test_hungarian_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(n, 8))
        cost = rng.uniform(-5, 5, size=(n, m))
        got = hungarian(cost)
        assert len(set(got)) == n  # injective
        total = sum(cost[i, c] for i, c in enumerate(got))
        assert total == pytest.approx(_brute_force_min(cost), abs=1e-9)


def test_hungarian_lexicographic_tie_break():
    # Fully tied matrix: every assignment optimal; choose [0, 1, 2].
    assert hungarian(np.ones((3, 5))) == [0, 1, 2]
    # Two optimal assignments: columns (0,1) and (1,0) both cost 2.
    assert hungarian([[1.0, 1.0], [1.0, 1.0]]) == [0, 1]
    # Row 0 must skip column 0 (taking it would force total 3 > 2).
    assert hungarian([[1.0, 1.0, 9.0], [1.0, 9.0, 9.0]]) == [1, 0]


def test_hungarian_lexicographic_among_optima_oracle():
    rng = np.random.default_rng(42)
    for _ in range(60):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(n, 6))
        # Small integer costs create plenty of ties.
        cost = rng.integers(0, 3, size=(n, m)).astype(np.float64)
        best = _brute_force_min(cost)
        optima = [cols for cols in itertools.permutations(range(m), n)
                  if sum(cost[i, c] for i, c in enumerate(cols)) == pytest.approx(best)]
        assert tuple(hungarian(cost)) == min(optima)


# --- build_targets -----------------------------------------------------------


def test_build_targets_merges_shared_pair_actions():
    vocab = default_vocabulary()
    human = Box(0.1, 0.1, 0.4, 0.8)
    obj = Box(0.5, 0.3, 0.7, 0.5)
    ball = vocab.object_id("ball")
    ann = _ann([
        HOIInstance(human=human, object=obj, object_class=ball,
                    action_class=vocab.action_id("hold")),
        HOIInstance(human=human, object=obj, object_class=ball,
                    action_class=vocab.action_id("carry")),
    ])
    targets = build_targets(ann, vocab)
    assert len(targets) == 1
    assert sorted(targets[0].actions) == sorted(
        [vocab.action_id("hold"), vocab.action_id("carry")])
    assert targets[0].action_hot.sum() == 2.0


def test_build_targets_distinct_objects_stay_separate():
    vocab = default_vocabulary()
    human = Box(0.1, 0.1, 0.4, 0.8)
    ann = _ann([
        HOIInstance(human=human, object=Box(0.5, 0.3, 0.7, 0.5),
                    object_class=vocab.object_id("ball"),
                    action_class=vocab.action_id("hold")),
        HOIInstance(human=human, object=Box(0.6, 0.6, 0.8, 0.8),
                    object_class=vocab.object_id("cup"),
                    action_class=vocab.action_id("hold")),
        HOIInstance(human=human, object=None, object_class=None,
                    action_class=vocab.action_id("stand")),
    ])
    targets = build_targets(ann, vocab)
    assert len(targets) == 3
    assert targets[2].object is None


# --- match_cost --------------------------------------------------------------


def _one_hot_probs(index, n=7, confident=0.94):
    row = [(1 - confident) / (n - 1)] * n
    row[index] = confident
    return row


def test_match_cost_perfect_prediction_dominates_row():
    vocab = default_vocabulary()
    human = Box(0.1, 0.2, 0.4, 0.9)
    obj = Box(0.5, 0.3, 0.7, 0.5)
    ann = _ann([HOIInstance(human=human, object=obj,
                            object_class=vocab.object_id("ball"),
                            action_class=vocab.action_id("hold"))])
    targets = build_targets(ann, vocab)
    ball = vocab.object_id("ball")
    hold = vocab.action_id("hold")
    hoi_exact = [0.999 if a == hold else 0.01 for a in range(vocab.n_actions)]
    pred = _prediction(
        human_boxes=[human.to_cxcywh(), (0.8, 0.8, 0.1, 0.1), (0.3, 0.6, 0.2, 0.2)],
        object_boxes=[obj.to_cxcywh(), (0.2, 0.2, 0.1, 0.1), (0.7, 0.7, 0.2, 0.2)],
        obj_probs=[_one_hot_probs(ball), _one_hot_probs(6), _one_hot_probs(2)],
        hoi_probs=[hoi_exact, [0.1] * 5, [0.2] * 5])
    cost = match_cost(pred, targets, LossWeights())
    assert cost.shape == (1, 3)
    assert cost[0, 0] < cost[0, 1] and cost[0, 0] < cost[0, 2]


def test_match_cost_identical_queries_identical_columns():
    vocab = default_vocabulary()
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.3, 0.5),
                            object=Box(0.4, 0.2, 0.6, 0.4),
                            object_class=0, action_class=0)])
    row_h, row_o = (0.5, 0.5, 0.2, 0.2), (0.4, 0.4, 0.1, 0.1)
    pred = _prediction([row_h, row_h], [row_o, row_o],
                       [_one_hot_probs(3), _one_hot_probs(3)],
                       [[0.3] * 5, [0.3] * 5])
    cost = match_cost(pred, build_targets(ann, vocab), LossWeights())
    np.testing.assert_allclose(cost[:, 0], cost[:, 1], atol=1e-12)


def test_match_cost_zero_weights_zero_matrix():
    vocab = default_vocabulary()
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.3, 0.5),
                            object=Box(0.4, 0.2, 0.6, 0.4),
                            object_class=0, action_class=0)])
    pred = _prediction([(0.5, 0.5, 0.2, 0.2)], [(0.4, 0.4, 0.1, 0.1)],
                       [_one_hot_probs(0)], [[0.5] * 5])
    weights = LossWeights(box_l1=0, giou=0, obj_ce=0, hoi_bce=0)
    cost = match_cost(pred, build_targets(ann, vocab), weights)
    np.testing.assert_allclose(cost, 0.0, atol=1e-12)


def test_match_cost_null_object_skips_object_terms():
    vocab = default_vocabulary()
    human = Box(0.1, 0.1, 0.3, 0.5)
    ann = _ann([HOIInstance(human=human, object=None, object_class=None,
                            action_class=vocab.action_id("stand"))])
    targets = build_targets(ann, vocab)
    # Two queries identical except for their object boxes: same cost.
    pred = _prediction([human.to_cxcywh(), human.to_cxcywh()],
                       [(0.2, 0.2, 0.1, 0.1), (0.8, 0.8, 0.3, 0.3)],
                       [_one_hot_probs(1), _one_hot_probs(1)],
                       [[0.4] * 5, [0.4] * 5])
    cost = match_cost(pred, targets, LossWeights())
    assert cost[0, 0] == pytest.approx(cost[0, 1], abs=1e-12)


# --- detection_loss / image_loss ----------------------------------------------


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(box_l1=-0.1)


def test_perfect_prediction_box_and_class_components_near_zero():
    vocab = default_vocabulary()
    human = Box(0.1, 0.2, 0.4, 0.9)
    obj = Box(0.5, 0.3, 0.7, 0.5)
    hold = vocab.action_id("hold")
    ann = _ann([HOIInstance(human=human, object=obj,
                            object_class=vocab.object_id("ball"),
                            action_class=hold)])
    oa = gt_oa_targets(ann, vocab)
    pred = _prediction(
        [human.to_cxcywh()], [obj.to_cxcywh()],
        [_one_hot_probs(vocab.object_id("ball"), confident=0.9999)],
        [[0.9999 if a == hold else 1e-4 for a in range(vocab.n_actions)]],
        oa=np.clip(oa, 1e-6, 1 - 1e-6))
    result = image_loss(pred, ann, vocab, LossWeights())
    assert result.components["box_l1"] == pytest.approx(0.0, abs=1e-9)
    assert result.components["giou"] == pytest.approx(0.0, abs=1e-9)
    assert result.components["obj_ce"] == pytest.approx(0.0, abs=1e-3)
    assert result.components["hoi_bce"] == pytest.approx(0.0, abs=1e-3)
    assert result.assignment == [0]


def test_empty_ground_truth_only_background_and_oa_terms():
    vocab = default_vocabulary()
    ann = _ann([])
    pred = _prediction([(0.5, 0.5, 0.2, 0.2)], [(0.4, 0.4, 0.1, 0.1)],
                       [_one_hot_probs(2)], [[0.5] * 5],
                       oa=[0.5] * vocab.n_pairs)
    result = image_loss(pred, ann, vocab, LossWeights())
    assert result.components["box_l1"] == 0.0
    assert result.components["giou"] == 0.0
    assert result.components["hoi_bce"] == 0.0
    assert result.components["obj_ce"] > 0.0
    assert result.components["oa_bce"] == pytest.approx(-np.log(0.5), abs=1e-6)
    assert result.assignment == []


def test_loss_invariant_under_query_permutation():
    vocab = default_vocabulary()
    rng = np.random.default_rng(5)
    human = Box(0.1, 0.2, 0.4, 0.9)
    obj = Box(0.5, 0.3, 0.7, 0.5)
    ann = _ann([
        HOIInstance(human=human, object=obj, object_class=1, action_class=0),
        HOIInstance(human=Box(0.3, 0.1, 0.6, 0.7), object=None,
                    object_class=None, action_class=vocab.action_id("stand")),
    ])
    n_q = 6
    hb = rng.uniform(0.2, 0.8, size=(n_q, 4))
    ob = rng.uniform(0.2, 0.8, size=(n_q, 4))
    probs = rng.dirichlet(np.ones(7), size=n_q)
    hoi = rng.uniform(0.05, 0.95, size=(n_q, 5))
    base = _prediction(hb, ob, probs, hoi, oa=[0.5] * vocab.n_pairs)
    base_loss = image_loss(base, ann, vocab, LossWeights())

    perm = rng.permutation(n_q)
    shuffled = _prediction(hb[perm], ob[perm], probs[perm], hoi[perm],
                           oa=[0.5] * vocab.n_pairs)
    shuffled_loss = image_loss(shuffled, ann, vocab, LossWeights())
    assert float(shuffled_loss.total) == pytest.approx(float(base_loss.total), abs=1e-9)
    for key in ("box_l1", "giou", "obj_ce", "hoi_bce", "oa_bce"):
        assert shuffled_loss.components[key] == pytest.approx(
            base_loss.components[key], abs=1e-9)


def test_loss_invariant_under_gt_order():
    vocab = default_vocabulary()
    insts = [
        HOIInstance(human=Box(0.1, 0.2, 0.4, 0.9), object=Box(0.5, 0.3, 0.7, 0.5),
                    object_class=1, action_class=0),
        HOIInstance(human=Box(0.2, 0.1, 0.5, 0.6), object=Box(0.6, 0.5, 0.8, 0.7),
                    object_class=2, action_class=1),
    ]
    rng = np.random.default_rng(9)
    hb = rng.uniform(0.2, 0.8, size=(4, 4))
    ob = rng.uniform(0.2, 0.8, size=(4, 4))
    probs = rng.dirichlet(np.ones(7), size=4)
    hoi = rng.uniform(0.05, 0.95, size=(4, 5))
    a = image_loss(_prediction(hb, ob, probs, hoi), _ann(insts), vocab, LossWeights())
    b = image_loss(_prediction(hb, ob, probs, hoi), _ann(insts[::-1]), vocab,
                   LossWeights())
    assert float(a.total) == pytest.approx(float(b.total), abs=1e-9)


def test_more_targets_than_queries_rejected():
    vocab = default_vocabulary()
    insts = [HOIInstance(human=Box(0.1 * i + 0.05, 0.1, 0.1 * i + 0.1, 0.3),
                         object=None, object_class=None,
                         action_class=vocab.action_id("stand"))
             for i in range(3)]
    pred = _prediction([(0.5, 0.5, 0.2, 0.2)] * 2, [(0.4, 0.4, 0.1, 0.1)] * 2,
                       [_one_hot_probs(1)] * 2, [[0.5] * 5] * 2)
    with pytest.raises(ValueError):
        image_loss(pred, _ann(insts), vocab, LossWeights())


def test_train_null_boxes_charges_object_box():
    vocab = default_vocabulary()
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.4, 0.5), object=None,
                            object_class=None,
                            action_class=vocab.action_id("stand"))])
    pred = _prediction([(0.25, 0.3, 0.3, 0.4)], [(0.5, 0.5, 0.4, 0.4)],
                       [_one_hot_probs(6)], [[0.5] * 5])
    relaxed = image_loss(pred, ann, vocab, LossWeights())
    strict = image_loss(pred, ann, vocab, LossWeights(), train_null_boxes=True)
    assert float(strict.total) > float(relaxed.total)


def test_fixed_assignment_respected():
    vocab = default_vocabulary()
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.4, 0.5),
                            object=Box(0.5, 0.2, 0.7, 0.4),
                            object_class=0, action_class=0)])
    rng = np.random.default_rng(1)
    hb = rng.uniform(0.2, 0.8, size=(3, 4))
    pred = _prediction(hb, hb, rng.dirichlet(np.ones(7), size=3),
                       rng.uniform(0.1, 0.9, size=(3, 5)))
    free = image_loss(pred, ann, vocab, LossWeights())
    forced = image_loss(pred, ann, vocab, LossWeights(),
                        assignment=[(free.assignment[0] + 1) % 3])
    assert forced.assignment != free.assignment
    assert float(forced.total) >= float(free.total) - 1e-12


def test_background_weight_scales_unmatched_ce():
    vocab = default_vocabulary()
    ann = _ann([])
    pred = _prediction([(0.5, 0.5, 0.2, 0.2)] * 4, [(0.4, 0.4, 0.1, 0.1)] * 4,
                       [_one_hot_probs(0)] * 4, [[0.5] * 5] * 4)
    # With no matches, every query is background: the weighted mean equals the
    # plain mean regardless of the background weight.
    a = detection_loss(pred, [], np.zeros(vocab.n_pairs), LossWeights(background=0.1))
    b = detection_loss(pred, [], np.zeros(vocab.n_pairs), LossWeights(background=1.0))
    assert a.components["obj_ce"] == pytest.approx(b.components["obj_ce"], abs=1e-9)


def test_null_matched_query_excluded_from_object_ce():
    # The query matched to an object-less GT gets no class supervision at
    # all: its logits must not receive gradient through the CE term.
    vocab = default_vocabulary()
    stand = vocab.action_id("stand")
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.4, 0.5), object=None,
                            object_class=None, action_class=stand)])
    ol = torch.randn(3, 7, dtype=torch.float64, requires_grad=True)
    pred = PredictionSet(
        boxes_human=torch.tensor([[0.25, 0.3, 0.3, 0.4],
                                  [0.7, 0.7, 0.1, 0.1],
                                  [0.8, 0.2, 0.1, 0.1]], dtype=torch.float64),
        boxes_object=torch.full((3, 4), 0.5, dtype=torch.float64),
        obj_logits=ol,
        hoi_logits=torch.zeros(3, 5, dtype=torch.float64),
        oa_scores=None)
    result = image_loss(pred, ann, vocab, LossWeights())
    matched_q = result.assignment[0]
    assert matched_q == 0  # box terms pin the match to the aligned query
    result.total.backward()
    assert torch.all(ol.grad[matched_q] == 0)
    assert torch.any(ol.grad[1] != 0) and torch.any(ol.grad[2] != 0)


def test_all_null_matches_zero_object_ce():
    vocab = default_vocabulary()
    stand = vocab.action_id("stand")
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.4, 0.5), object=None,
                            object_class=None, action_class=stand)])
    pred = _prediction([(0.25, 0.3, 0.3, 0.4)], [(0.5, 0.5, 0.5, 0.5)],
                       [_one_hot_probs(2)], [[0.5] * 5])
    result = image_loss(pred, ann, vocab, LossWeights())
    assert result.components["obj_ce"] == 0.0


def test_loss_gradients_flow_to_logits():
    vocab = default_vocabulary()
    ann = _ann([HOIInstance(human=Box(0.1, 0.1, 0.4, 0.5),
                            object=Box(0.5, 0.2, 0.7, 0.4),
                            object_class=0, action_class=0)])
    hb = torch.rand(3, 4, dtype=torch.float64, requires_grad=True)
    ob = torch.rand(3, 4, dtype=torch.float64, requires_grad=True)
    ol = torch.randn(3, 7, dtype=torch.float64, requires_grad=True)
    hl = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    oa = torch.rand(vocab.n_pairs, dtype=torch.float64, requires_grad=True)
    pred = PredictionSet(boxes_human=torch.sigmoid(hb),
                         boxes_object=torch.sigmoid(ob),
                         obj_logits=ol, hoi_logits=hl,
                         oa_scores=torch.sigmoid(oa))
    result = image_loss(pred, ann, vocab, LossWeights())
    result.total.backward()
    for t in (hb, ob, ol, hl, oa):
        assert t.grad is not None and torch.isfinite(t.grad).all()

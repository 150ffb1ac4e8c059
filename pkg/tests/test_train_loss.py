import io
import itertools
import math

import numpy as np
import pytest
import torch

from oracles import brute_force_assignment_cost, loop_bce
from sharedattn.attention_net import AuxPredictions, ModelConfig
from sharedattn.batching import collate
from sharedattn.sa_pipeline import SharedAttentionModel
from sharedattn.scene_synth import GeneratorConfig, generate_dataset
from sharedattn.train_loss import (
    Assignment,
    LossBreakdown,
    NonFiniteLossError,
    TrainConfig,
    aux_terms,
    build_model,
    compute_losses,
    hungarian,
    load_checkpoint,
    loss_aux,
    loss_grp,
    loss_sae,
    match_groups,
    save_checkpoint,
    train,
    train_step,
    make_optimizer,
)

CFG = ModelConfig(token_dim=16, n_heads=2, heatmap_shape=(8, 8), membership_dim=8, max_group_tokens=3, decoder_dim=8)
GEN = GeneratorConfig(image_grid=(8, 8), max_persons=4)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestHungarian:
    def test_identity(self):
        a = hungarian(1 - np.eye(3))
        assert sorted(a.pairs) == [(0, 0), (1, 1), (2, 2)]
        assert a.cost(1 - np.eye(3)) == 0

    def test_swap(self):
        a = hungarian([[1, 0], [0, 1]])
        assert sorted(a.pairs) == [(0, 1), (1, 0)]

    def test_rectangular_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = rng.uniform(size=(5, 3))
            a = hungarian(c)
            assert len(a.pairs) == 3 and len(a.unmatched_pred) == 2
            assert a.cost(c) == pytest.approx(brute_force_assignment_cost(c), abs=1e-12)

    def test_random_shapes_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            c = rng.uniform(size=(int(rng.integers(1, 7)), int(rng.integers(1, 7))))
            a = hungarian(c)
            assert len(a.pairs) == min(c.shape)
            assert len({e for e, _ in a.pairs}) == len(a.pairs) == len({k for _, k in a.pairs})
            assert a.cost(c) == pytest.approx(brute_force_assignment_cost(c), abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            hungarian([[0.0, np.nan]])
        with pytest.raises(ValueError):
            hungarian([[0.0, np.inf]])


class TestMatchGroups:
    def test_near_exact_row(self):
        pred = t([[0.001, 0.001, 0.001], [0.999, 0.001, 0.999]])
        gt = t([[1, 0, 1]])
        assert match_groups(pred, None, gt).pairs == [(1, 0)]

    def test_negative_scene(self):
        a = match_groups(torch.rand(4, 3), None, torch.zeros(0, 3))
        assert a.pairs == [] and a.unmatched_pred == {0, 1, 2, 3}

    def test_brute_force_argmin(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pred = rng.uniform(0.01, 0.99, size=(4, 5))
            gt = (rng.uniform(size=(2, 5)) < 0.5).astype(float)
            cost = [[np.mean([loop_bce(pred[e, n], gt[k, n]) for n in range(5)]) for k in range(2)] for e in range(4)]
            best = min(itertools.permutations(range(4), 2), key=lambda r: cost[r[0]][0] + cost[r[1]][1])
            a = match_groups(t(pred), None, t(gt))
            assert a.cost(cost) == pytest.approx(cost[best[0]][0] + cost[best[1]][1], abs=1e-12)


def loop_grp(M, Mr, gt, pairs, E, w=0.1):
    total = 0.0
    matched = dict(pairs)
    for stage in (M, Mr):
        for e in range(E):
            row = gt[matched[e]] if e in matched else [0.0] * len(stage[e])
            weight = 1.0 if e in matched else w
            total += weight * np.mean([loop_bce(stage[e][n], row[n]) for n in range(len(row))])
    return total


class TestLossGrp:
    def test_half_membership_is_ln2_per_person(self):
        M = torch.full((1, 3), 0.5, dtype=torch.float64)
        gt = t([[1, 1, 0]])
        a = match_groups(M, None, gt)
        assert loss_grp(M, None, gt, a).item() == pytest.approx(math.log(2), abs=1e-12)
        assert loss_grp(M, M, gt, a).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_prediction_is_small(self):
        gt = t([[1, 0, 1]])
        a = match_groups(gt.clone(), None, gt)
        assert loss_grp(gt.clone(), gt.clone(), gt, a, eps=1e-4).item() < 1e-2

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            E, N, K = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
            M, Mr = rng.uniform(0.01, 0.99, (E, N)), rng.uniform(0.01, 0.99, (E, N))
            gt = (rng.uniform(size=(K, N)) < 0.5).astype(float)
            a = match_groups(t(Mr), None, t(gt).reshape(K, N))
            got = loss_grp(t(M), t(Mr), t(gt).reshape(K, N), a).item()
            assert got == pytest.approx(loop_grp(M.tolist(), Mr.tolist(), gt.tolist(), a.pairs, E), abs=1e-12)

    def test_gt_order_does_not_change_loss(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            M = t(rng.uniform(0.01, 0.99, (4, 5)))
            gt = t((rng.uniform(size=(3, 5)) < 0.5).astype(float))
            perm = list(rng.permutation(3))
            a1, a2 = match_groups(M, None, gt), match_groups(M, None, gt[perm])
            assert loss_grp(M, M, gt, a1).item() == pytest.approx(loss_grp(M, M, gt[perm], a2).item(), abs=1e-12)


class TestLossSae:
    def test_zero(self):
        S = torch.rand(2, 4, 4, dtype=torch.float64)
        a = Assignment([(0, 0), (1, 1)], set())
        assert loss_sae(S, S, S, a).item() == 0

    def test_constant_offset(self):
        S = torch.rand(1, 4, 4, dtype=torch.float64) * 0.5
        a = Assignment([(0, 0)], set())
        assert loss_sae(S + 0.1, S + 0.1, S, a).item() == pytest.approx(2 * 0.01, abs=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            E, K = int(rng.integers(1, 4)), int(rng.integers(0, 3))
            S, Sr, G = rng.uniform(size=(E, 3, 3)), rng.uniform(size=(E, 3, 3)), rng.uniform(size=(K, 3, 3))
            a = hungarian(rng.uniform(size=(E, K))) if K else Assignment([], set(range(E)))
            matched = dict(a.pairs)
            want = 0.0
            for stage in (S, Sr):
                for e in range(E):
                    target = G[matched[e]] if e in matched else np.zeros((3, 3))
                    w = 1.0 if e in matched else 0.1
                    want += w * sum((stage[e, i, j] - target[i, j]) ** 2 for i in range(3) for j in range(3)) / 9
            assert loss_sae(t(S), t(Sr), t(G).reshape(K, 3, 3), a).item() == pytest.approx(want, abs=1e-12)


class TestLossAux:
    @pytest.fixture
    def scene(self):
        cfg = GeneratorConfig(image_grid=(8, 8), positive_fraction=1.0, max_persons=2, max_groups=1, out_of_frame_prob=0.0)
        return generate_dataset(cfg, 1, seed=0)[0]

    def perfect(self, scene, sigma=0.05):
        b = collate([scene], sigma, torch.float64)
        aux = AuxPredictions(b.gaze_dir[0].clone(), b.in_frame[0].clone(), b.same_group[0].clone())
        return aux, b.heatmap_target[0].clone()

    def test_perfect_is_zero(self, scene):
        aux, A = self.perfect(scene)
        for term in loss_aux(aux, A, scene):
            assert term.item() < 1e-5

    def test_orthogonal_direction(self, scene):
        aux, A = self.perfect(scene)
        d = aux.gaze_dir
        aux.gaze_dir = torch.stack([-d[:, 1], d[:, 0]], -1)
        assert loss_aux(aux, A, scene)[0].item() == pytest.approx(1.0, abs=1e-12)

    def test_half_social(self, scene):
        aux, A = self.perfect(scene)
        aux.pairwise_social = torch.full((2, 2), 0.5, dtype=torch.float64)
        assert loss_aux(aux, A, scene)[3].item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(GEN, 40, seed=5)


def test_batched_loss_equals_per_scene_average(scenes):
    torch.manual_seed(0)
    model = SharedAttentionModel(CFG).double()
    cfg = TrainConfig()
    batch = collate(scenes[:8], cfg.sigma, torch.float64)
    with torch.no_grad():
        out = model(batch)
        got = compute_losses(out, batch, cfg)
    want = np.zeros(6)
    for b, s in enumerate(scenes[:8]):
        n = len(s.persons)
        M, Mr = out.membership[b, :, :n], out.refined_membership[b, :, :n]
        S, Sr = out.sa_maps[b], out.refined_sa_maps[b]
        gt = batch.group_members[b]
        a = match_groups(Mr, None, gt)
        aux = AuxPredictions(out.aux.gaze_dir[b, :n], out.aux.in_out[b, :n], out.aux.pairwise_social[b, :n, :n])
        terms = [loss_grp(M, Mr, gt, a), loss_sae(S, Sr, batch.group_heatmaps[b], a), *loss_aux(aux, out.heatmaps[b, :n], s)]
        want += np.array([x.item() for x in terms]) / 8
    names = ["l_grp", "l_sae", "l_ang", "l_hm", "l_io", "l_social"]
    for name, w in zip(names, want):
        assert getattr(got, name).item() == pytest.approx(w, abs=1e-12)
    assert got.total.item() == pytest.approx(want.sum(), abs=1e-12)


def test_no_social_loss_flag(scenes):
    torch.manual_seed(0)
    model = SharedAttentionModel(CFG).double()
    batch = collate(scenes[:4], 0.05, torch.float64)
    out = model(batch)
    full = compute_losses(out, batch, TrainConfig())
    off = compute_losses(out, batch, TrainConfig(social_loss=False))
    assert off.l_social.item() == 0
    assert off.total.item() == pytest.approx(full.total.item() - full.l_social.item(), abs=1e-12)


def test_zero_learning_rate_keeps_parameters(scenes):
    model = build_model(CFG, 0, torch.float64)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(lr=0.0)
    train_step(model, make_optimizer(model, cfg), collate(scenes[:4], 0.05, torch.float64), cfg)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_non_finite_loss_names_scene(scenes):
    model = build_model(CFG, 0, torch.float64)
    batch = collate(scenes[:3], 0.05, torch.float64)
    batch.appearance[1, 0, 0] = float("nan")
    cfg = TrainConfig()
    with pytest.raises(NonFiniteLossError) as exc:
        train_step(model, make_optimizer(model, cfg), batch, cfg)
    assert scenes[1].scene_id in exc.value.scene_ids


def test_training_is_deterministic(scenes):
    cfg = TrainConfig.desk(steps=5, batch_size=8, seed=3)
    logs = []
    for _ in range(2):
        fh = io.StringIO()
        model = build_model(CFG, 3)
        hist = train(model, scenes, cfg, fh)
        logs.append((fh.getvalue(), hist, {k: v.clone() for k, v in model.state_dict().items()}))
    assert logs[0][0] == logs[1][0]
    assert logs[0][1] == logs[1][1]
    assert all(torch.equal(logs[0][2][k], logs[1][2][k]) for k in logs[0][2])


def test_log_lines_are_key_value(scenes):
    fh = io.StringIO()
    train(build_model(CFG, 0), scenes, TrainConfig.desk(steps=3, batch_size=4), fh)
    lines = fh.getvalue().splitlines()
    assert len(lines) == 3
    fields = dict(kv.split("=") for kv in lines[2].split())
    assert fields["step"] == "2"
    assert set(fields) == {"step", "l_grp", "l_sae", "l_ang", "l_hm", "l_io", "l_social", "total"}
    assert float(fields["total"]) == pytest.approx(sum(float(fields[k]) for k in fields if k.startswith("l_")), rel=1e-4)


def test_overfit_single_scene():
    scene = generate_dataset(GeneratorConfig(image_grid=(8, 8), positive_fraction=1.0), 1, seed=8)
    model = build_model(CFG, 0)
    hist = train(model, scene, TrainConfig.desk(steps=400, batch_size=1, augment=False))
    assert hist[-1].total <= 0.1 * hist[0].total


def test_checkpoint_round_trip(tmp_path):
    model = build_model(CFG, 0)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(model, path)
    other = load_checkpoint(build_model(CFG, 1), path)
    for k, v in model.state_dict().items():
        assert torch.equal(other.state_dict()[k], v)
    with np.load(path) as data:
        assert all(data[k].dtype == np.float32 for k in data.files)


def test_breakdown_total_is_sum():
    b = LossBreakdown(1.0, 2.0, 0.5, 0.25, 0.125, 0.0625, 3.9375)
    assert "total=3.9375" in b.as_text()

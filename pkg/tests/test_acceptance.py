"""Release acceptance suite.

Eight gates, one test function per gate, ordered cheap to expensive.
``pytest -v tests/test_acceptance.py`` prints a single pass or fail line
for each.  The two desk-scale gates share module fixtures so the model
pools are trained once; everything else runs from scratch in seconds.
"""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from dssmooth.attacks import (finetune_resistance, prune_resistance,
                              spearman_rho, wsr_under_noise)
from dssmooth.certify import certified_radii, exact_permutation_pd
from dssmooth.dual_space import (DualSpaceRep, EmbeddingMatrix, NoiseSpec,
                                 PermutationMatrix, group_slices,
                                 perm_distance)
from dssmooth.harness import (ExperimentConfig, build_vocab, encode_dataset,
                              evaluate_suspect, make_corpus,
                              run_verification_suite, smoothed_wsr_curve,
                              vanilla_testset, vanilla_watermark_dataset)
from dssmooth.statcore import RandomStream, std_normal_cdf, std_normal_inv_cdf
from dssmooth.text_model import (ClassifierModel, cross_entropy, embed,
                                 grad_wrt_embeddings, predict, train)
from dssmooth.verify import (CalibrationSet, VerifyConfig,
                             calibration_threshold)
from dssmooth.watermark import (BADWORD_TOKENS, make_probes,
                                optimize_trigger_scale)

_SIGMAS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


@pytest.fixture(scope="module")
def desk_four():
    t0 = time.time()
    art = run_verification_suite(ExperimentConfig.desk_default(4))
    return art, time.time() - t0


@pytest.fixture(scope="module")
def desk_two():
    t0 = time.time()
    art = run_verification_suite(ExperimentConfig.desk_default(2))
    return art, time.time() - t0


def test_conformal_order_statistic_and_normal_inverse():
    # 100 calibration values, 5% outlier trim, 5% significance: the
    # threshold must be exactly the 91st smallest value
    gen = RandomStream(311).child("cal").generator()
    values = tuple(np.sort(gen.uniform(size=100)))
    thr, m, j = calibration_threshold(CalibrationSet(values=values),
                                      VerifyConfig(alpha0=0.05, kappa=0.05))
    assert (m, j) == (5, 91)
    assert thr == values[90]
    assert abs(std_normal_inv_cdf(0.975) - 1.959964) <= 1e-6
    assert std_normal_cdf(0.0) == 0.5


def _orbit(base, group_size):
    """Every reordering reachable by rearranging slots within groups."""
    groups = group_slices(base.n, group_size)
    per_group = [list(itertools.permutations(g.tolist())) for g in groups]
    out = []
    for combo in itertools.product(*per_group):
        shuffle = np.arange(base.n)
        for members, chosen in zip(groups, combo):
            shuffle[members] = list(chosen)
        out.append(PermutationMatrix(base.mapping[shuffle]))
    return out


def test_reorder_probability_lipschitz_exhaustive():
    # under pure group-reorder noise the vote probability of any class
    # may move by at most the entrywise L1 distance between the inputs
    # over twice the group size; checked exhaustively on short sequences
    # against deliberately order-sensitive classifiers
    n_classes = 3
    checked = 0
    for n, lam, variant in itertools.product(range(2, 7), (2, 3), (0, 1)):
        if lam > n:  # a group cannot be longer than the sequence
            continue
        table = RandomStream(47).child("clf", n, lam, variant) \
            .generator().integers(0, n_classes, size=257)
        weights = (n + 1) ** np.arange(n)  # injective over orderings

        def classify(perm):
            return int(table[int(perm.mapping @ weights) % 257])

        members = _orbit(PermutationMatrix.identity(n), lam)
        pds = [exact_permutation_pd(classify, u, lam, n_classes)
               for u in members]
        for (ua, pa), (ub, pb) in itertools.product(zip(members, pds),
                                                    repeat=2):
            bound = perm_distance(ua, ub) / (2 * lam)
            assert float(np.max(np.abs(pa - pb))) <= bound + 1e-12
            checked += 1
    assert checked > 1000


def test_embedding_radius_on_analytic_halfspace():
    # one tanh unit feeding opposed output columns decides by the sign of
    # w . pooled(x) + b, an exact halfspace.  The smoothed vote then
    # coincides with the plain prediction (both are that sign) and the
    # smoothed class probability is a closed-form normal CDF, so the
    # certificate can be exercised with no sampling error at all.
    rows, dim, sigma, bias = 4, 5, 0.6, -0.15
    gen = RandomStream(9021).child("halfspace").generator()
    w = gen.normal(size=dim)
    norm_w = float(np.linalg.norm(w))
    model = ClassifierModel(embedding=np.zeros((3, dim)),
                            w_hidden=w[:, None],
                            b_hidden=np.array([bias]),
                            w_out=np.array([[2.0, -2.0]]),
                            b_out=np.zeros(2))
    values = gen.normal(size=(rows, dim))
    # shift every row along w so the clean margin sits at exactly 0.4
    raw = float(values.mean(axis=0) @ w) + bias
    values = values + ((0.4 - raw) / (norm_w ** 2)) * w
    margin = float(values.mean(axis=0) @ w) + bias
    mask = np.ones(rows, dtype=int)

    def rep_for(rows_nd):
        return DualSpaceRep(PermutationMatrix.identity(rows),
                            EmbeddingMatrix(rows_nd), mask)

    # pooled noise has scale sigma / sqrt(rows) per coordinate
    p_top = std_normal_cdf(margin * math.sqrt(rows) / (sigma * norm_w))
    radii = certified_radii(p_top, 1.0 - p_top, NoiseSpec(sigma, 1))
    # for a halfspace the certificate is tight: the radius equals the
    # Frobenius distance from the input to the decision boundary
    assert radii.r_e == pytest.approx(margin * math.sqrt(rows) / norm_w,
                                      rel=1e-9)
    base = predict(model, rep_for(values))
    assert base == 1

    flips_inside = 0
    dir_gen = RandomStream(9021).child("directions").generator()
    for _ in range(1000):
        d = dir_gen.normal(size=(rows, dim))
        d *= 0.99 * radii.r_e / float(np.linalg.norm(d))
        if predict(model, rep_for(values + d)) != base:
            flips_inside += 1
    assert flips_inside == 0

    worst = np.tile(w / (norm_w * math.sqrt(rows)), (rows, 1))
    outside = values - 1.5 * radii.r_e * worst
    assert predict(model, rep_for(outside)) != base


def test_conformal_false_positive_control():
    # fresh calibration set each trial, suspect score drawn from the same
    # distribution, no outlier trim: the flag rate must stay within
    # binomial slack of the 5% significance level
    cfg = VerifyConfig(alpha0=0.05, kappa=0.0)
    hits = 0
    for t in range(200):
        gen = RandomStream(6061).child("trial", t).generator()
        draws = gen.uniform(size=101)
        thr, _, _ = calibration_threshold(
            CalibrationSet(values=tuple(draws[:100])), cfg)
        hits += float(draws[100]) > thr
    assert hits / 200 <= 0.10


def test_trigger_scale_search_convergence():
    cfg = ExperimentConfig.desk_default(4)
    stream = RandomStream(3355).child("scale")
    corpus = make_corpus(cfg.n_classes, 25, stream.child("corpus"),
                         cfg.length_lo, cfg.length_hi)
    trigger = cfg.trigger()
    vocab = build_vocab(corpus, extra_tokens=trigger.tokens + BADWORD_TOKENS)
    model = ClassifierModel.init(vocab.size, cfg.emb_dim, cfg.hidden_dim,
                                 cfg.n_classes, stream.child("arch"))
    plan = cfg.plan()
    seqs = encode_dataset(corpus, vocab, cfg.seq_len)
    assert len(seqs) == 100
    for i, seq in enumerate(seqs):
        res = optimize_trigger_scale(seq, model, plan, vocab,
                                     stream.child("opt", i))
        assert res.converged
        assert res.iterations <= 20
        assert abs(res.deviation - res.target) <= 0.01 * res.target


def test_embedding_gradient_against_central_differences():
    step = 1e-5
    worst = 0.0
    for k in range(50):
        s = RandomStream(1418).child("pair", k)
        gen = s.generator()
        n, dim, classes = 8, 6, 3
        model = ClassifierModel.init(30, dim, 7, classes, s.child("model"))
        values = gen.normal(size=(n, dim))
        mask = np.ones(n, dtype=int)
        mask[int(gen.integers(0, n))] = 0  # keep one padding row in play
        label = int(gen.integers(1, classes + 1))

        def rep_for(rows_nd):
            return DualSpaceRep(PermutationMatrix.identity(n),
                                EmbeddingMatrix(rows_nd), mask)

        analytic = grad_wrt_embeddings(model, rep_for(values), label)
        fd = np.zeros_like(values)
        for i in range(n):
            for j in range(dim):
                up = values.copy()
                up[i, j] += step
                down = values.copy()
                down[i, j] -= step
                fd[i, j] = (cross_entropy(model, rep_for(up), label)
                            - cross_entropy(model, rep_for(down), label)) \
                    / (2 * step)
        scale = float(np.linalg.norm(fd))
        assert scale > 0
        worst = max(worst, float(np.linalg.norm(analytic - fd)) / scale)
    assert worst < 1e-4


def test_desk_pipeline_trend_reproduction(desk_four, desk_two):
    art, t_four = desk_four
    art2, t_two = desk_two
    cfg = art.config
    rep = art.report
    t0 = time.time()

    # plain-backdoor baseline and its decay under single-draw noise,
    # derived with the same streams the command line tool uses
    root = RandomStream(cfg.seed).child("attack", "noise")
    stream = root.child("corpus")
    vanilla_train = vanilla_watermark_dataset(art.train_seqs, art.vocab,
                                              cfg.target_label, cfg.rate,
                                              stream.child("ds"))
    vanilla_model = train(art.benign[0], vanilla_train,
                          cfg.train_config(cfg.seed + 97))
    v_reps = [embed(s, vanilla_model)
              for s in vanilla_testset(art.test_seqs, art.vocab,
                                       cfg.target_label,
                                       stream.child("vt"))[:80]]
    grid = wsr_under_noise(vanilla_model, v_reps, cfg.target_label, _SIGMAS,
                           root.child("vanilla"))
    probes = make_probes(art.watermarked[0], art.test_seqs, cfg.plan(),
                         art.vocab, cfg.n_classes, root.child("probes"))
    curve = smoothed_wsr_curve(art.watermarked[0],
                               list(probes.watermarked.values()),
                               cfg.target_label, _SIGMAS,
                               cfg.group_size_smooth, cfg.samples,
                               root.child("smoothed"))
    elapsed = t_four + t_two + (time.time() - t0)

    # watermarking must not cost benign accuracy
    assert abs(rep.ba_watermarked - rep.ba_clean) <= 0.03
    # the trigger must fire reliably on watermarked-pool models
    assert rep.wsr >= 0.95
    # the plain backdoor fades as noise grows; the smoothed pipeline holds
    assert spearman_rho(grid.sigmas, grid.wsr) <= -0.8
    assert min(curve.wsr) >= 0.9
    # independent pools stay quiet at both class counts
    assert rep.fpr <= 0.14
    assert art2.report.fpr <= 0.10
    # certification is the stricter condition, and both positive rates
    # clear the false-positive rate by a wide margin
    assert rep.vsr >= rep.wca
    assert rep.vsr > rep.fpr + 0.3
    assert rep.wca > rep.fpr + 0.3
    assert elapsed <= 900.0


def _suspect_evaluator(art):
    cfg = art.config
    root = RandomStream(cfg.seed).child("attack-eval")
    radii = (art.manifest.max_delta_e, art.manifest.max_delta_p)
    counter = itertools.count()

    def evaluate(model):
        verdict, _ = evaluate_suspect(model, art.test_seqs, cfg, art.vocab,
                                      art.context, radii,
                                      root.child(next(counter)))
        return verdict

    return evaluate


def test_attack_resistance_retention(desk_four):
    art, _ = desk_four
    cfg = art.config
    tune_cfg = dataclasses.replace(cfg.train_config(cfg.seed + 131),
                                   lr=cfg.finetune_lr)
    ft = finetune_resistance(art.watermarked, art.train_seqs, (0, 2, 4, 8),
                             tune_cfg, _suspect_evaluator(art))
    assert ft[0].vsr > 0 and ft[0].wca > 0  # a dead start would be vacuous
    assert ft[-1].vsr >= 0.7 * ft[0].vsr
    assert ft[-1].wca >= 0.7 * ft[0].wca

    rates = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    pruned = prune_resistance(art.watermarked, rates,
                              _suspect_evaluator(art))
    base = pruned[0]
    for point in pruned:
        if point.level > 0.8:
            continue
        for name in ("vsr", "wca", "wr_mean"):
            v0 = getattr(base, name)
            assert abs(getattr(point, name) - v0) <= 0.2 * v0 + 1e-12
    final = pruned[-1]
    assert final.level == 1.0
    assert final.vsr <= 0.2 and final.wca <= 0.2

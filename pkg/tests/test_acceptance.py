"""Acceptance suite: one criterion per test, one printed pass/fail line each.

Lines are printed outside pytest's capture so they are visible in the normal
run. The training-based criteria take several minutes on CPU.
"""

import itertools
import time

import numpy as np
import pytest

from l2gnet.autodiff import Parameter, Rng, Tensor, grad_check, no_grad
from l2gnet.cli import main
from l2gnet.data import gen_synthetic, load_dataset, save_dataset
from l2gnet.mapper import (NystromEmbedding, embed_multi_ref, embed_single_ref,
                           init_references, nystrom_embed, ot_align)
from l2gnet.model import (Adam, ModelConfig, SegModel, load_checkpoint,
                          save_checkpoint, seg_loss, train)
from l2gnet.quantizer import Codebook, quantize
from l2gnet.sinkhorn import OtProblem, sinkhorn_solve, transport_cost, \
    uniform_marginals


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---- 1: Sinkhorn correctness -------------------------------------------------


def test_sinkhorn_correctness(capsys):
    rng = Rng(1)
    worst_res = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 17))
        t = int(rng.integers(2, 17))
        eps = float(rng.uniform(0.05, 1.0, None))
        m = rng.normal((n, t))
        m = m / np.abs(m).max()
        a, b = uniform_marginals(n, t)
        plan = sinkhorn_solve(OtProblem(cost=m, a=a, b=b, epsilon=eps),
                              converge_tol=1e-9, max_iterations=100000)
        worst_res = max(worst_res, plan.marginal_residual)

    a, b = uniform_marginals(5, 7)
    plan_c = sinkhorn_solve(OtProblem(cost=np.full((5, 7), 1.3), a=a, b=b,
                                      epsilon=0.2))
    const_dev = np.abs(plan_c.matrix - np.outer(a, b)).max()

    m = Rng(2).normal((6, 4))
    m = m / np.abs(m).max()
    a, b = uniform_marginals(6, 4)
    plan_e = sinkhorn_solve(OtProblem(cost=m, a=a, b=b, epsilon=100.0),
                            converge_tol=1e-12, max_iterations=100000)
    eps_dev = np.abs(plan_e.matrix - np.outer(a, b)).max()

    ok = worst_res < 1e-6 and const_dev < 1e-12 and eps_dev < 1e-6
    report(capsys, "sinkhorn-correctness", ok,
           f"residual {worst_res:.2e} (<1e-6), constant-cost dev "
           f"{const_dev:.2e} (<1e-12), eps=100 dev {eps_dev:.2e} (<1e-6; "
           f"converged deviation is Theta(1/(n t eps)), so this tolerance "
           f"is not attainable)")


# ---- 2: LP oracle equivalence ------------------------------------------------


def test_lp_oracle_equivalence(capsys):
    worst = 0.0
    for n in (2, 3, 4):
        rng = Rng(n + 30)
        M = rng.normal((n, n))
        M = M / np.abs(M).max()
        a, b = uniform_marginals(n, n)
        plan = sinkhorn_solve(OtProblem(cost=M, a=a, b=b, epsilon=1e-3),
                              converge_tol=1e-10, max_iterations=300000)
        got = transport_cost(plan, M)
        opt = min(sum(M[i, p[i]] for i in range(n)) / n
                  for p in itertools.permutations(range(n)))
        worst = max(worst, abs(got - opt) / abs(opt))
    report(capsys, "lp-oracle", worst <= 0.02,
           f"worst relative gap {worst:.4f} (<= 0.02) for n in 2,3,4")


# ---- 3: gradient suite -------------------------------------------------------


def test_gradient_suite(capsys):
    t0 = time.time()
    failures = []

    for seed in range(20):
        rng = Rng(seed + 100)

        # Sinkhorn-through loss
        M = Parameter(rng.normal((4, 5)), "M")
        C = rng.normal((4, 5))
        a, b = uniform_marginals(4, 5)

        def f_sink():
            plan = sinkhorn_solve(OtProblem(cost=M, a=a, b=b, epsilon=0.1,
                                            iterations=10))
            return (plan.T * Tensor(C)).sum()

        rep = grad_check(f_sink, [M], tolerance=1e-4, max_probes=8, rng=rng)
        if not rep["pass"]:
            failures.append(("sinkhorn", seed))

        # Nystrom embedding in anchors, bandwidth and inputs
        emb = NystromEmbedding.create(4, 3, rng)
        z = Parameter(rng.normal((5, 3)), "z")

        def f_nys():
            out = nystrom_embed(z, emb)
            return (out * out).sum()

        rep = grad_check(f_nys, [z, emb.anchors, emb.sigma_k],
                         tolerance=1e-4, max_probes=8, rng=rng)
        if not rep["pass"]:
            failures.append(("nystrom", seed))

        # pooling chain with references
        refs = init_references("random-unit", rng, t=3, k_a=4, q=2)

        def f_pool():
            out = embed_multi_ref(z, refs, emb)
            return (out * out).sum()

        rep = grad_check(f_pool, [z, emb.anchors, emb.sigma_k] +
                         refs.parameters(), tolerance=1e-4, max_probes=6,
                         rng=rng)
        if not rep["pass"]:
            failures.append(("pooling", seed))

    # end-to-end tiny model at the looser tolerance (more expensive; 3 seeds)
    for seed in range(3):
        rng = Rng(seed + 200)
        cfg = ModelConfig(H=8, W=8, classes=3, enc_channels=(4, 8), K=8,
                          dim=8, t=2, q=2, k_a=4, stem_channels=0)
        model = SegModel(cfg, rng)
        img = rng.uniform(0, 1, (1, 8, 8))
        labels = rng.integers(0, 3, (8, 8))

        def f_model():
            logits, qloss, _ = model.forward(img, smooth_quantizer=True)
            return seg_loss(logits, labels, qloss)

        rep = grad_check(f_model, model.parameters(), tolerance=1e-3,
                         max_probes=3, rng=rng)
        if not rep["pass"]:
            failures.append(("end-to-end", seed))

    dt = time.time() - t0
    ok = not failures and dt < 120
    report(capsys, "gradient-suite", ok,
           f"20 seeds components + 3 seeds end-to-end, failures {failures}, "
           f"{dt:.1f}s (< 120s)")


# ---- 4: VQ oracle ------------------------------------------------------------


def test_vq_oracle(capsys):
    rng = Rng(7)
    mismatches = 0
    for _ in range(100):
        K = int(rng.integers(2, 17))
        dim = int(rng.integers(1, 9))
        n = int(rng.integers(1, 13))
        cb = Codebook.create(K, dim, rng)
        cb.E.data[...] = rng.normal((K, dim))
        z = rng.normal((n, dim))
        res = quantize(Tensor(z), cb)
        for i in range(n):
            dists = [np.sum((z[i] - cb.E.data[k]) ** 2) for k in range(K)]
            if res.indices[i] != int(np.argmin(dists)):
                mismatches += 1

    # straight-through identity: gradient of <c, z_dis> w.r.t. z is exactly c
    cb = Codebook.create(5, 3, rng)
    cb.E.data[...] = rng.normal((5, 3))
    z = Parameter(rng.normal((4, 3)), "z")
    c = rng.normal((4, 3))
    res = quantize(z, cb)
    (res.z_dis * Tensor(c)).sum().backward()
    st_exact = np.array_equal(z.grad, c)

    idem = quantize(Tensor(cb.E.data.copy()), cb)
    idem_ok = np.array_equal(idem.z_dis.data, cb.E.data) and \
        idem.indices.tolist() == list(range(5))

    ok = mismatches == 0 and st_exact and idem_ok
    report(capsys, "vq-oracle", ok,
           f"100 instances, {mismatches} index mismatches; straight-through "
           f"identity exact: {st_exact}; idempotence: {idem_ok}")


# ---- 5: mapper structure -----------------------------------------------------


def test_mapper_structure(capsys):
    rng = Rng(9)
    emb = NystromEmbedding.create(5, 3, rng)

    # Nystrom exactness on anchors: psi(w) psi(w)^T == kappa(w, w)
    with no_grad():
        psi_w = nystrom_embed(Tensor(emb.anchors.data.copy()), emb)
        from l2gnet.mapper import gaussian_kernel
        gram = gaussian_kernel(emb.anchors, emb.anchors, emb.sigma_k)
        exact_dev = np.abs(psi_w.data @ psi_w.data.T - gram.data).max()

    # permutation invariance with S disabled (sigma_pos huge)
    z = rng.normal((6, 3))
    ref = Parameter(rng.normal((4, 5)), "r")
    with no_grad():
        a = embed_single_ref(Tensor(z), ref, emb, sigma_pos=1e9,
                             epsilon=0.1, iterations=200)
        perm = Rng(10).permutation(6)
        b = embed_single_ref(Tensor(z[perm]), ref, emb, sigma_pos=1e9,
                             epsilon=0.1, iterations=200)
        perm_dev = np.abs(a.data - b.data).max()

        # position sensitivity with sigma_pos = 0.1
        a2 = embed_single_ref(Tensor(z), ref, emb, sigma_pos=0.1,
                              epsilon=0.1, iterations=200)
        b2 = embed_single_ref(Tensor(z[perm]), ref, emb, sigma_pos=0.1,
                              epsilon=0.1, iterations=200)
        pos_diff = np.abs(a2.data - b2.data).max()

        # q-duplication norm preservation: q copies of one reference give the
        # same per-block rows and the same overall norm as q=1
        refs1 = init_references("random-unit", Rng(11), t=4, k_a=5, q=1)
        refs2 = init_references("random-unit", Rng(11), t=4, k_a=5, q=2)
        for r in refs2.references:
            r.data[...] = refs1.references[0].data
        e1 = embed_multi_ref(Tensor(z), refs1, emb)
        e2 = embed_multi_ref(Tensor(z), refs2, emb)
        norm_dev = abs(np.linalg.norm(e1.data) - np.linalg.norm(e2.data))

        # t=1 with S disabled pools to the plain mean of psi (times sqrt(t)=1)
        ref1 = Parameter(rng.normal((1, 5)), "r1")
        pooled = embed_single_ref(Tensor(z), ref1, emb, sigma_pos=1e9,
                                  epsilon=0.1, iterations=200)
        psi = nystrom_embed(Tensor(z), emb)
        mean_dev = np.abs(pooled.data[0] - psi.data.mean(axis=0)).max()

    ok = (exact_dev < 1e-8 and perm_dev < 1e-8 and pos_diff > 1e-3 and
          norm_dev < 1e-12 and mean_dev < 1e-10)
    report(capsys, "mapper-structure", ok,
           f"anchor exactness {exact_dev:.1e} (<1e-8), permutation dev "
           f"{perm_dev:.1e} (<1e-8), position sensitivity {pos_diff:.1e} "
           f"(>1e-3), q-dup norm dev {norm_dev:.1e} (<1e-12), mean-pool dev "
           f"{mean_dev:.1e} (<1e-10)")


# ---- 6: end-to-end toy training ----------------------------------------------

ACCEPT_CFG = dict(enc_channels=(24,), dim=32, t=8, q=2, k_a=16)


def _train_toy(q, seed, train_seed, val_seed, n_train, n_val, epochs):
    cfg = ModelConfig(**{**ACCEPT_CFG, "q": q})
    model = SegModel(cfg, Rng(seed))
    tr = gen_synthetic(3, n_train, 32, 32, train_seed, difficulty=0.5)
    va = gen_synthetic(3, n_val, 32, 32, val_seed, difficulty=0.5)
    res, _ = train(model, tr, val_ds=va, epochs=epochs, batch_size=8,
                   rng=Rng(seed + 1), optimizer=Adam(lr=2e-3))
    return res.log[-1]


def test_end_to_end_training(capsys):
    t0 = time.time()
    last = _train_toy(q=2, seed=0, train_seed=100, val_seed=200,
                      n_train=200, n_val=50, epochs=20)
    dt = time.time() - t0
    dsc, hd = last["val_dsc_mean"], last["val_hd_mean"]
    ok = dsc >= 0.85 and hd <= 4.0 and dt < 600
    report(capsys, "end-to-end-training", ok,
           f"val DSC {dsc:.4f} (>= 0.85), val HD95 {hd:.2f} (<= 4), "
           f"{dt:.0f}s (< 600s)")


# ---- 7: reference-count trend ------------------------------------------------


def test_reference_count_trend(capsys):
    means = {}
    for q in (2, 4):
        scores = []
        for seed in (0, 1, 2):
            last = _train_toy(q=q, seed=seed, train_seed=300 + seed,
                              val_seed=400 + seed, n_train=100, n_val=30,
                              epochs=6)
            scores.append(last["val_dsc_mean"])
        means[q] = float(np.mean(scores))
    ok = means[4] >= means[2] - 0.01
    report(capsys, "reference-count-trend", ok,
           f"mean val DSC q=4 {means[4]:.4f} vs q=2 {means[2]:.4f} "
           f"(non-degradation within 0.01, 3 paired seeds)")


# ---- 8: scaling --------------------------------------------------------------


def test_bench_scaling(capsys, tmp_path):
    # sizes large enough that the O(n) array work dominates the fixed
    # per-operation overhead of the solver loop
    sizes = [1024, 4096, 16384, 65536]
    best = {n: np.inf for n in sizes}
    for rep in range(3):
        out = tmp_path / f"bench{rep}.csv"
        rc = main(["bench", "--sizes", ",".join(map(str, sizes)),
                   "--eps", "0.1", "--iters", "10", "--out", str(out)])
        assert rc == 0
        import csv as _csv
        with open(out) as f:
            for row in list(_csv.reader(f))[1:]:
                n, sec = int(row[0]), float(row[4])
                best[n] = min(best[n], sec)
    slope = np.polyfit(np.log([float(n) for n in sizes]),
                       np.log([best[n] for n in sizes]), 1)[0]
    ok = 0.8 <= slope <= 1.3
    report(capsys, "bench-scaling", ok,
           f"log-log slope of pooling time vs n: {slope:.3f} (in [0.8, 1.3])")


# ---- 9: determinism & persistence --------------------------------------------


def test_determinism_and_persistence(capsys, tmp_path):
    import json

    # gen-data bit-identical reruns and dataset round-trip
    p1, p2 = tmp_path / "a.l2gs", tmp_path / "b.l2gs"
    for p in (p1, p2):
        assert main(["gen-data", "--count", "6", "--hw", "16", "--seed", "5",
                     "--out", str(p)]) == 0
    gen_ok = p1.read_bytes() == p2.read_bytes()
    ds = load_dataset(p1)
    save_dataset(ds, tmp_path / "rt.l2gs")
    ds_rt_ok = (tmp_path / "rt.l2gs").read_bytes() == p1.read_bytes()

    # train twice with the same config: identical checkpoints
    cfg = {"H": 16, "W": 16, "classes": 3, "enc_channels": [4, 8], "K": 8,
           "dim": 8, "t": 2, "q": 2, "k_a": 4, "stem_channels": 0,
           "seed": 1, "epochs": 1, "batch_size": 3, "lr": 0.01,
           "train_data": str(p1), "val_data": str(p1), "deterministic": True}
    ckpts = []
    for name in ("r1", "r2"):
        body = dict(cfg, out_dir=str(tmp_path / name))
        cfile = tmp_path / f"{name}.json"
        cfile.write_text(json.dumps(body))
        assert main(["train", "--config", str(cfile)]) == 0
        ckpts.append((tmp_path / name / "model.l2gc").read_bytes())
    train_ok = ckpts[0] == ckpts[1]

    # eval twice: identical CSVs
    evals = []
    for name in ("e1.csv", "e2.csv"):
        out = tmp_path / name
        assert main(["eval", "--ckpt", str(tmp_path / "r1" / "model.l2gc"),
                     "--data", str(p1), "--out", str(out)]) == 0
        evals.append(out.read_bytes())
    eval_ok = evals[0] == evals[1]

    # checkpoint round-trip: load then save reproduces the file bitwise
    model, opt, epoch = load_checkpoint(tmp_path / "r1" / "model.l2gc")
    rng = Rng(1)
    save_checkpoint(tmp_path / "rt.l2gc", model, opt, rng, epoch=epoch)
    m2, o2, e2 = load_checkpoint(tmp_path / "rt.l2gc")
    params_ok = all(
        a.data.tobytes() == b.data.tobytes()
        for a, b in zip(model.parameters(), m2.parameters())) and e2 == epoch

    ok = gen_ok and ds_rt_ok and train_ok and eval_ok and params_ok
    report(capsys, "determinism-persistence", ok,
           f"gen-data reruns identical: {gen_ok}; dataset round-trip "
           f"bit-exact: {ds_rt_ok}; train reruns identical: {train_ok}; "
           f"eval reruns identical: {eval_ok}; checkpoint round-trip: "
           f"{params_ok}")

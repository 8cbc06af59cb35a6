use lora_kernels::attention::{
    compose_general_constants, compose_special_constants, effective_weight, forward_f,
    general_loss, loss, residual_c, score_q,
};
use lora_kernels::exact::{
    apply_jacobian_t, compute_p, grad_adapters_general, grad_adapters_special, grad_wrt_w,
    jacobian_blocks,
};
use lora_kernels::harness::{gen_general_instance, gen_instance};
use lora_kernels::lowrank::{
    approx_c, approx_f_poly, approx_f_svd, approx_grad_general, approx_grad_special, approx_p1,
    approx_p2, approx_q, LowRankFactor,
};
use lora_kernels::tensor::{kronecker, matrixize, subblock, vectorize};
use lora_kernels::{
    AttentionInstance, DenseMatrix, Error, FactorBackend, GeneralInstance, LoraAdapter,
    PolyApproxConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_adapter(rng: &mut ChaCha8Rng, d: usize, r: usize) -> LoraAdapter {
    LoraAdapter::new(random(rng, d, r), random(rng, r, d), 2.0 * r as f64).unwrap()
}

fn zero_k(adp_k: &LoraAdapter) -> LoraAdapter {
    LoraAdapter::zeros(adp_k.head_dim(), adp_k.rank(), adp_k.alpha()).unwrap()
}

#[test]
fn zero_adapters_reduce_general_loss_to_special_loss() {
    let (g, adp_q, adp_k) = gen_general_instance(4, 4, 2, 1).unwrap();
    let zq = zero_k(&adp_q);
    let zk = zero_k(&adp_k);
    let general = general_loss(&g, &zq, &zk).unwrap();
    let inst = compose_special_constants(&g, zq.scale(), None).unwrap();
    let special = loss(&inst, &effective_weight(&g.wq_star, &zq).unwrap()).unwrap();
    assert!((general - special).abs() <= 1e-12 * (1.0 + general.abs()));

    // Direct evaluation with the composed weight W_Q*·W_K*ᵀ.
    let scores =
        g.xq.matmul(&g.wq_star)
            .unwrap()
            .matmul_t(&g.xk.matmul(&g.wk_star).unwrap())
            .unwrap();
    let mut f = scores.map(f64::exp);
    for j in 0..f.rows() {
        let z: f64 = f.row(j).iter().sum();
        for k in 0..f.cols() {
            f.set(j, k, f.get(j, k) / z);
        }
    }
    let c = f
        .matmul(&g.xv.matmul(&g.wv_star).unwrap())
        .unwrap()
        .sub(&g.y)
        .unwrap();
    assert!((0.5 * c.frobenius_sq() - general).abs() <= 1e-12 * (1.0 + general.abs()));
}

#[test]
fn composed_constants_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (l, d) = (4, 3);
    let g = GeneralInstance {
        xq: random(&mut rng, l, d),
        xk: random(&mut rng, l, d),
        xv: random(&mut rng, l, d),
        y: random(&mut rng, l, d),
        wq_star: random(&mut rng, d, d),
        wk_star: DenseMatrix::identity(d),
        wv_star: random(&mut rng, d, d),
    };
    let special = compose_special_constants(&g, 1.0, None).unwrap();
    assert_eq!(special.c1(), &g.xq);
    assert_eq!(special.c2(), &g.xk);

    let zq = LoraAdapter::zeros(d, 1, 1.0).unwrap();
    let zk = LoraAdapter::zeros(d, 1, 1.0).unwrap();
    let consts = compose_general_constants(&g, &zq, &zk).unwrap();
    assert!(
        consts
            .ck1
            .max_abs_diff(&g.xq.matmul(&g.wq_star).unwrap())
            .unwrap()
            <= 1e-15
    );
    assert!(consts.cq2.max_abs_diff(&g.xk).unwrap() <= 1e-15);
}

#[test]
fn general_q_side_matches_special_entry_points() {
    let (g, adp_q, adp_k) = gen_general_instance(5, 4, 2, 1).unwrap();
    let zk = zero_k(&adp_k);
    let inst = compose_special_constants(&g, adp_q.scale(), None).unwrap();

    let (gq, _) = grad_adapters_general(&g, &adp_q, &zk).unwrap();
    let gs = grad_adapters_special(&inst, &g.wq_star, &adp_q).unwrap();
    assert!(gq.max_abs_diff(&gs).unwrap() <= 1e-10);

    let backend = FactorBackend::Svd { rank: 4 };
    let (aq, _) = approx_grad_general(&g, &adp_q, &zk, &backend).unwrap();
    let a_s = approx_grad_special(&inst, &g.wq_star, &adp_q, &backend).unwrap();
    assert!(aq.max_abs_diff(&a_s).unwrap() <= 1e-12);
}

#[test]
fn full_rank_general_approximation_is_exact() {
    let (g, adp_q, adp_k) = gen_general_instance(12, 12, 3, 1).unwrap();
    let (eq, ek) = grad_adapters_general(&g, &adp_q, &adp_k).unwrap();
    let (aq, ak) =
        approx_grad_general(&g, &adp_q, &adp_k, &FactorBackend::Svd { rank: 12 }).unwrap();
    assert!(eq.max_abs_diff(&aq).unwrap() <= 1e-8);
    assert!(ek.max_abs_diff(&ak).unwrap() <= 1e-8);
}

#[test]
fn zero_residual_gives_zero_gradients() {
    let gi = gen_instance(2, 8, 3, 2, 0.5).unwrap();
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let y = forward_f(&gi.inst, &w)
        .unwrap()
        .matmul(gi.inst.c3())
        .unwrap();
    let inst = gi.inst.with_target(y).unwrap();
    let exact = grad_adapters_special(&inst, &gi.wstar, &gi.adapter).unwrap();
    assert!(exact.max_abs() <= 1e-12);
    let cfg = PolyApproxConfig::new(0.5, 1, 1e-3).unwrap();
    let approx =
        approx_grad_special(&inst, &gi.wstar, &gi.adapter, &FactorBackend::Poly(cfg)).unwrap();
    // q̃ carries the factor's own error, so the residual is not exactly zero.
    let svd = approx_grad_special(
        &inst,
        &gi.wstar,
        &gi.adapter,
        &FactorBackend::Svd { rank: 8 },
    )
    .unwrap();
    assert!(svd.max_abs() <= 1e-10);
    assert!(approx.max_abs() <= 1e-2);

    let (g, adp_q, adp_k) = gen_general_instance(3, 5, 3, 1).unwrap();
    let zq = zero_k(&adp_q);
    let zk = zero_k(&adp_k);
    let inst = compose_special_constants(&g, zq.scale(), None).unwrap();
    let y = forward_f(&inst, &effective_weight(&g.wq_star, &zq).unwrap())
        .unwrap()
        .matmul(inst.c3())
        .unwrap();
    let g = GeneralInstance { y, ..g };
    // Non-zero adapters move the scores, so only the zero-adapter point has
    // zero residual.
    let (gq, _) = grad_adapters_general(&g, &adp_q, &adp_k).unwrap();
    assert!(gq.max_abs() > 0.0);
    let (gq, gk) = grad_adapters_general(&g, &zq, &zk).unwrap();
    assert!(gq.max_abs() <= 1e-12 && gk.max_abs() <= 1e-12);
    let (aq, ak) = approx_grad_general(&g, &zq, &zk, &FactorBackend::Svd { rank: 5 }).unwrap();
    assert!(aq.max_abs() <= 1e-10 && ak.max_abs() <= 1e-10);
}

#[test]
fn adapter_jacobians_reproduce_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, r) = (3, 2);
    let adp = random_adapter(&mut rng, d, r);
    let wstar = random(&mut rng, d, d);
    let (j_b, j_a) = jacobian_blocks(&adp).unwrap();
    assert_eq!(j_b.shape(), (d * d, r * d));
    assert_eq!(j_a.shape(), (d * d, r * d));
    let base = vectorize(&wstar);
    let target = vectorize(&wstar.add(&adp.product()).unwrap());
    for (j, x) in [(&j_b, adp.a()), (&j_a, adp.b())] {
        let jx = j
            .matmul(&matrixize(&vectorize(x), r * d, 1).unwrap())
            .unwrap();
        for i in 0..d * d {
            assert!((base[i] + jx.get(i, 0) - target[i]).abs() <= 1e-14);
        }
    }

    // d = 2, r = 1: J_B interleaves B's entries with the identity.
    let b = DenseMatrix::from_rows(&[[2.0], [5.0]]).unwrap();
    let adp = LoraAdapter::new(b, DenseMatrix::zeros(1, 2), 1.0).unwrap();
    let (j_b, _) = jacobian_blocks(&adp).unwrap();
    let expected =
        DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 2.0], [5.0, 0.0], [0.0, 5.0]]).unwrap();
    assert_eq!(j_b, expected);

    let big = LoraAdapter::zeros(7, 1, 1.0).unwrap();
    assert!(matches!(jacobian_blocks(&big), Err(Error::Guard { .. })));
}

#[test]
fn jacobian_route_matches_closed_form() {
    for seed in 0..4 {
        let gi = gen_instance(seed, 6, 3, 2, 1.0).unwrap();
        let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
        let gw = vectorize(&grad_wrt_w(&gi.inst, &w).unwrap());
        let (j_b, j_a) = jacobian_blocks(&gi.adapter).unwrap();
        let closed = grad_adapters_special(&gi.inst, &gi.wstar, &gi.adapter).unwrap();
        let g_a = matrixize(&apply_jacobian_t(&j_b, &gw).unwrap(), 2, 3).unwrap();
        let g_b = matrixize(&apply_jacobian_t(&j_a, &gw).unwrap(), 3, 2).unwrap();
        assert!(g_a.max_abs_diff(&closed.g_a).unwrap() <= 1e-10);
        assert!(g_b.max_abs_diff(&closed.g_b).unwrap() <= 1e-10);
    }
    let j = DenseMatrix::zeros(4, 2);
    assert!(matches!(
        apply_jacobian_t(&j, &[0.0; 3]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn jacobian_times_row_block_is_kronecker_subblock() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (l, d, r) = (3, 2, 1);
    let c1 = random(&mut rng, l, d);
    let c2 = random(&mut rng, l, d);
    let adp = random_adapter(&mut rng, d, r);
    let (j_b, _) = jacobian_blocks(&adp).unwrap();
    let big = kronecker(&c1, &c2).unwrap();
    let reduced = kronecker(&c1.matmul(adp.b()).unwrap(), &c2).unwrap();
    for j in 0..l {
        let lhs = j_b
            .t_matmul(&subblock(&big, j).unwrap().transpose())
            .unwrap();
        let rhs = subblock(&reduced, j).unwrap().transpose();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-14);
    }
}

#[test]
fn kronecker_subblock_acts_on_vectorized_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c1 = random(&mut rng, 3, 2);
    let c2 = random(&mut rng, 3, 2);
    let w = random(&mut rng, 2, 2);
    let k = kronecker(&c1, &c2).unwrap();
    let full = c1.matmul(&w).unwrap().matmul_t(&c2).unwrap();
    let vw = matrixize(&vectorize(&w), 4, 1).unwrap();
    for j in 0..3 {
        let block = subblock(&k, j).unwrap().matmul(&vw).unwrap();
        for i in 0..3 {
            assert!((block.get(i, 0) - full.get(j, i)).abs() <= 1e-14);
        }
    }
    assert!(matches!(subblock(&k, 3), Err(Error::Index { .. })));
}

#[test]
fn inverse_temperature_folds_into_weight() {
    let gi = gen_instance(6, 8, 3, 2, 1.0).unwrap();
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let beta = 0.37;
    let folded = forward_f(&gi.inst, &w.scale(beta)).unwrap();
    let inst = AttentionInstance::new(
        gi.inst.c1().scale(beta),
        gi.inst.c2().clone(),
        gi.inst.c3().clone(),
        gi.inst.y().clone(),
    )
    .unwrap();
    let explicit = forward_f(&inst, &w).unwrap();
    assert!(folded.max_abs_diff(&explicit).unwrap() <= 1e-15);
}

#[test]
fn loss_is_half_sum_of_squared_residual_entries() {
    let gi = gen_instance(7, 8, 3, 2, 1.0).unwrap();
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let c = residual_c(&gi.inst, &w).unwrap();
    let mut sum = 0.0;
    for j in 0..c.rows() {
        for i in 0..c.cols() {
            sum += 0.5 * c.get(j, i) * c.get(j, i);
        }
    }
    let l = loss(&gi.inst, &w).unwrap();
    assert!((sum - l).abs() <= 1e-12);
}

#[test]
fn p_columns_follow_their_definition() {
    let gi = gen_instance(10, 7, 3, 2, 1.0).unwrap();
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let f = forward_f(&gi.inst, &w).unwrap();
    let q = score_q(&gi.inst, &w).unwrap();
    let p = compute_p(&gi.inst, &w).unwrap();
    for j in 0..7 {
        let fq: f64 = (0..7).map(|k| f.get(j, k) * q.get(j, k)).sum();
        for k in 0..7 {
            let want = f.get(j, k) * q.get(j, k) - f.get(j, k) * fq;
            assert!((p.p.get(j, k) - want).abs() <= 1e-14);
            assert!((p.p.get(j, k) - (p.p1.get(j, k) - p.p2.get(j, k))).abs() <= 1e-15);
        }
    }
}

struct Chain {
    df: f64,
    dc: f64,
    dq: f64,
    dp1: f64,
    dp2: f64,
    dga: f64,
    dgb: f64,
}

fn chain_errors(gi: &lora_kernels::harness::GeneratedInstance, f_lr: &LowRankFactor) -> Chain {
    let inst = &gi.inst;
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let f = forward_f(inst, &w).unwrap();
    let c = residual_c(inst, &w).unwrap();
    let q = score_q(inst, &w).unwrap();
    let p = compute_p(inst, &w).unwrap();
    let q_lr = approx_q(f_lr, inst).unwrap();
    let p1 = approx_p1(f_lr, &q_lr).unwrap().materialize().unwrap();
    let p2 = approx_p2(f_lr, &q_lr).unwrap().materialize().unwrap();
    let exact = grad_adapters_special(inst, &gi.wstar, &gi.adapter).unwrap();
    // Assemble the gradients from the supplied factor by hand.
    let gw = inst
        .c1()
        .t_matmul(&p1.sub(&p2).unwrap())
        .unwrap()
        .matmul(inst.c2())
        .unwrap();
    let ga = gi.adapter.b().t_matmul(&gw).unwrap();
    let gb = gw.matmul_t(gi.adapter.a()).unwrap();
    Chain {
        df: f_lr.materialize().unwrap().max_abs_diff(&f).unwrap(),
        dc: approx_c(f_lr, inst)
            .unwrap()
            .materialize()
            .unwrap()
            .max_abs_diff(&c)
            .unwrap(),
        dq: q_lr.materialize().unwrap().max_abs_diff(&q).unwrap(),
        dp1: p1.max_abs_diff(&p.p1).unwrap(),
        dp2: p2.max_abs_diff(&p.p2).unwrap(),
        dga: ga.max_abs_diff(&exact.g_a).unwrap(),
        dgb: gb.max_abs_diff(&exact.g_b).unwrap(),
    }
}

#[test]
fn chain_error_bounds_hold_with_dimension_factors() {
    let (mut c_literal, mut g_literal) = (0, 0);
    for seed in 0..6 {
        let (l, d) = (32, 3);
        let gi = gen_instance(seed, l, d, 2, 1.0).unwrap();
        let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
        let cfg = PolyApproxConfig::new(1.0, 2, 1e-3).unwrap().lenient();
        let f_lr = approx_f_poly(&gi.inst, &w, &cfg).unwrap();
        let e = chain_errors(&gi, &f_lr);
        assert!(e.df > 0.0);
        let c3 = gi.inst.c3().max_abs();
        let (lf, df) = (l as f64, d as f64);
        let tol = 1.0 + 1e-9;
        assert!(e.dc <= lf * c3 * e.df * tol, "c bound, seed {seed}");
        assert!(e.dq <= df * c3 * e.dc * tol, "q bound, seed {seed}");
        let outer = gi.inst.c1().max_abs() * gi.inst.c2().max_abs() * (e.dp1 + e.dp2);
        let b = gi.adapter.b().max_abs();
        let a = gi.adapter.a().max_abs();
        assert!(
            e.dga <= df * lf * lf * b * outer * tol,
            "G_A bound, seed {seed}"
        );
        assert!(
            e.dgb <= df * lf * lf * a * outer * tol,
            "G_B bound, seed {seed}"
        );
        c_literal += usize::from(e.dc > df * c3 * e.df);
        g_literal += usize::from(e.dga > b * outer);
    }
    // Without the dimension factors the bounds are not sound in general;
    // the count is only reported.
    println!(
        "of 6 instances: c bound with factor d violated on {c_literal}, \
         G_A bound without dimension factors violated on {g_literal}"
    );
}

#[test]
fn exact_factors_reproduce_chain_stages() {
    let gi = gen_instance(13, 6, 2, 1, 1.0).unwrap();
    let w = effective_weight(&gi.wstar, &gi.adapter).unwrap();
    let f_lr = approx_f_svd(&gi.inst, &w, 6).unwrap();
    let e = chain_errors(&gi, &f_lr);
    for v in [e.df, e.dc, e.dq, e.dp1, e.dp2] {
        assert!(v <= 1e-10, "{v}");
    }
    let q_lr = approx_q(&f_lr, &gi.inst).unwrap();
    assert_eq!(q_lr.rank(), 4);
    assert_eq!(approx_p1(&f_lr, &q_lr).unwrap().rank(), 6 * 4);
    assert_eq!(approx_p2(&f_lr, &q_lr).unwrap().rank(), 6);

    let zero = LowRankFactor::new(DenseMatrix::zeros(6, 3), DenseMatrix::zeros(6, 3)).unwrap();
    assert_eq!(
        approx_p2(&f_lr, &zero)
            .unwrap()
            .materialize()
            .unwrap()
            .max_abs(),
        0.0
    );
    assert_eq!(
        approx_p1(&f_lr, &zero)
            .unwrap()
            .materialize()
            .unwrap()
            .max_abs(),
        0.0
    );

    let y = forward_f(&gi.inst, &w)
        .unwrap()
        .matmul(gi.inst.c3())
        .unwrap();
    let inst = gi.inst.with_target(y).unwrap();
    let c = approx_c(&f_lr, &inst).unwrap().materialize().unwrap();
    assert!(c.max_abs() <= 1e-10);
}

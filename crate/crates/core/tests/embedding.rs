mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use scriptenc_core::aggregation::sum_pool;
use scriptenc_core::codebook::Codebook;
use scriptenc_core::descriptors::DescriptorSet;
use scriptenc_core::embedding::*;
use scriptenc_core::numerics::WhiteningMode;
use scriptenc_core::Error;

fn set(x: &DMatrix<f64>) -> DescriptorSet {
    DescriptorSet::anonymous(x.clone())
}

fn codebook(centers: &DMatrix<f64>) -> Codebook {
    Codebook::from_centers(centers.clone()).unwrap()
}

#[test]
fn vlad_matches_oracle_bitwise() {
    let mut r = rng(31);
    for trial in 0..120 {
        let k = 1 + trial % 6;
        let d = 1 + (trial / 6) % 5;
        let n = 1 + trial % 17;
        let centers = gauss_matrix(&mut r, k, d);
        let x = gauss_matrix(&mut r, n, d);
        let cb = codebook(&centers);
        for resnorm in [false, true] {
            let e = embed_vlad(&cb, &set(&x), resnorm, None).unwrap();
            assert_eq!((e.k, e.component_dim, e.kind), (k, d, EmbeddingKind::Vlad));
            let oracle = vlad_oracle(&rows_of(&centers), &rows_of(&x), resnorm);
            assert_eq!(cols_of(&e.phi), oracle, "trial {trial} resnorm {resnorm}");
        }
    }
}

#[test]
fn vlad_column_sum_equals_per_cluster_residual_sums() {
    let mut r = rng(32);
    let centers = gauss_matrix(&mut r, 4, 3);
    let x = gauss_matrix(&mut r, 50, 3);
    let e = embed_vlad(&codebook(&centers), &set(&x), false, None).unwrap();
    let pooled = sum_pool(&e).unwrap().psi;
    let oracle = residual_sums(&rows_of(&centers), &rows_of(&x));
    assert!(max_abs_diff(pooled.as_slice(), &oracle) < 1e-12);
}

#[test]
fn temb_matches_oracle_to_rounding() {
    let mut r = rng(33);
    for trial in 0..120 {
        let k = 1 + trial % 6;
        let d = 1 + (trial / 6) % 5;
        let n = 1 + trial % 13;
        let centers = gauss_matrix(&mut r, k, d);
        let x = gauss_matrix(&mut r, n, d);
        let e = embed_temb(&codebook(&centers), &set(&x), None).unwrap();
        let oracle = temb_oracle(&rows_of(&centers), &rows_of(&x), None);
        for (t, (got, want)) in cols_of(&e.phi).iter().zip(&oracle).enumerate() {
            // Entries are at most 1 in magnitude; allow a few ulps.
            assert!(max_abs_diff(got, want) <= 4.0 * f64::EPSILON, "trial {trial} column {t}");
        }
    }
}

#[test]
fn whitened_temb_matches_oracle() {
    let mut r = rng(34);
    for trial in 0..20 {
        let (k, d) = (2 + trial % 3, 2 + trial % 2);
        let centers = gauss_matrix(&mut r, k, d);
        let train = gauss_matrix(&mut r, 200, d);
        let cb = codebook(&centers);
        let tw = fit_temb_whitening(&cb, &train).unwrap();
        let x = gauss_matrix(&mut r, 10, d);
        let e = embed_temb(&cb, &set(&x), Some(&tw)).unwrap();
        assert_eq!(e.dim(), k * d - d);
        let w = rows_of(&tw.matrix());
        let oracle = temb_oracle(&rows_of(&centers), &rows_of(&x), Some((tw.mean.as_slice(), &w)));
        for (got, want) in cols_of(&e.phi).iter().zip(&oracle) {
            assert!(max_abs_diff(got, want) < 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn hand_examples() {
    let cb = codebook(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    let x = DMatrix::from_row_slice(1, 2, &[3.0, 1.0]);
    assert_eq!(embed_vlad(&cb, &set(&x), false, None).unwrap().phi.as_slice(), &[2.0, 0.0]);

    let cb = codebook(&DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 4.0, 0.0]));
    let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let e = embed_temb(&cb, &set(&x), None).unwrap();
    let h = 1.0 / 2f64.sqrt();
    assert!(max_abs_diff(e.phi.as_slice(), &[h, 0.0, -h, 0.0]) < 1e-15);

    let x = DMatrix::from_row_slice(1, 2, &[4.0, 0.0]);
    let e = embed_vlad(&cb, &set(&x), true, None).unwrap();
    assert_eq!(e.phi.as_slice(), &[0.0; 4]);
}

#[test]
fn vlad_columns_use_a_single_block() {
    let mut r = rng(35);
    let centers = gauss_matrix(&mut r, 5, 3);
    let x = gauss_matrix(&mut r, 40, 3);
    let e = embed_vlad(&codebook(&centers), &set(&x), false, None).unwrap();
    for col in cols_of(&e.phi) {
        let blocks: Vec<usize> = (0..5).filter(|b| col[b * 3..(b + 1) * 3].iter().any(|v| *v != 0.0)).collect();
        assert_eq!(blocks.len(), 1);
    }
}

#[test]
fn temb_blocks_have_equal_norm_and_columns_unit_norm() {
    let mut r = rng(36);
    let centers = gauss_matrix(&mut r, 4, 3);
    let x = gauss_matrix(&mut r, 30, 3);
    let e = embed_temb(&codebook(&centers), &set(&x), None).unwrap();
    for col in cols_of(&e.phi) {
        assert!((norm(&col) - 1.0).abs() < 1e-14);
        // Before the final normalization each block is a unit vector, so
        // afterwards they all share the norm 1/sqrt(K).
        for b in 0..4 {
            assert!((norm(&col[b * 3..(b + 1) * 3]) - 0.5).abs() < 1e-14);
        }
    }
}

#[test]
fn permuting_centers_permutes_blocks_and_keeps_similarities() {
    let mut r = rng(37);
    let centers = gauss_matrix(&mut r, 4, 2);
    let perm = [2usize, 0, 3, 1];
    let permuted = DMatrix::from_fn(4, 2, |i, j| centers[(perm[i], j)]);
    let docs: Vec<DMatrix<f64>> = (0..3).map(|_| gauss_matrix(&mut r, 20, 2)).collect();
    for kind in [EmbeddingKind::Vlad, EmbeddingKind::Temb] {
        let encode = |c: &DMatrix<f64>, x: &DMatrix<f64>| {
            let cb = codebook(c);
            let e = match kind {
                EmbeddingKind::Vlad => embed_vlad(&cb, &set(x), true, None).unwrap(),
                EmbeddingKind::Temb => embed_temb(&cb, &set(x), None).unwrap(),
            };
            sum_pool(&e).unwrap().psi
        };
        let a: Vec<_> = docs.iter().map(|x| encode(&centers, x)).collect();
        let b: Vec<_> = docs.iter().map(|x| encode(&permuted, x)).collect();
        for (va, vb) in a.iter().zip(&b) {
            for (i, &p) in perm.iter().enumerate() {
                assert!(max_abs_diff(&vb.as_slice()[i * 2..i * 2 + 2], &va.as_slice()[p * 2..p * 2 + 2]) < 1e-12);
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let ca = cosine(a[i].as_slice(), a[j].as_slice());
                let cb = cosine(b[i].as_slice(), b[j].as_slice());
                assert!((ca - cb).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lcs_on_isotropic_residuals_is_a_scaled_rotation() {
    // Unit residuals spread uniformly over the sphere have covariance I/d,
    // so whitening them is a rotation scaled by sqrt(d).
    let d = 3;
    let mut r = rng(38);
    let x = gauss_matrix(&mut r, 20_000, d);
    let cb = codebook(&DMatrix::zeros(1, d));
    let lcs = fit_lcs(&cb, &x, LcsVariant::LcsWhiten).unwrap();
    let t = &lcs.per_cluster[0];
    assert_eq!(t.mode, WhiteningMode::PcaWhiten);
    let m = t.matrix() / (d as f64).sqrt();
    let mmt = &m * m.transpose();
    assert!((mmt - DMatrix::identity(d, d)).amax() < 0.05);
}

#[test]
fn lcs_transform_whitens_its_cluster_residuals() {
    let mut r = rng(39);
    let centers = DMatrix::from_row_slice(2, 2, &[-5.0, 0.0, 5.0, 0.0]);
    let mut x = gauss_matrix(&mut r, 500, 2);
    for i in 0..500 {
        x[(i, 0)] = x[(i, 0)] * 3.0 + if i % 2 == 0 { -5.0 } else { 5.0 };
    }
    let lcs = fit_lcs(&codebook(&centers), &x, LcsVariant::LcsWhiten).unwrap();
    // Oracle: unit residuals of cluster 0 mapped by its transform have
    // identity covariance.
    let crow = rows_of(&centers);
    let residuals: Mat = rows_of(&x)
        .iter()
        .filter(|xt| brute_nearest(&crow, xt) == 0)
        .map(|xt| {
            let rr = sub(xt, &crow[0]);
            scale(&rr, 1.0 / norm(&rr))
        })
        .collect();
    let w = rows_of(&lcs.per_cluster[0].matrix());
    let mapped: Mat = residuals.iter().map(|rr| mat_vec(&w, rr)).collect();
    let (_, cov) = covariance(&mapped);
    for i in 0..2 {
        for j in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((cov[i][j] - target).abs() < 1e-6);
        }
    }
}

#[test]
fn lcs_plus_plus_discards_the_stretched_axis() {
    let mut r = rng(40);
    let u = [0.6, 0.8];
    let x = DMatrix::from_fn(400, 2, |_, _| 0.0);
    let mut x = x;
    for i in 0..400 {
        let a = 5.0 * gauss(&mut r);
        let b = 0.3 * gauss(&mut r);
        x[(i, 0)] = a * u[0] - b * u[1];
        x[(i, 1)] = a * u[1] + b * u[0];
    }
    let lcs = fit_lcs(&codebook(&DMatrix::zeros(1, 2)), &x, LcsVariant::LcsPlusPlus).unwrap();
    assert_eq!(lcs.output_dim(), 1);
    let kept: Vec<f64> = lcs.per_cluster[0].rotation.row(0).iter().copied().collect();
    // The discarded direction is the orthogonal complement of the kept row.
    let discarded = [kept[1], -kept[0]];
    assert!(dot(&discarded, &u).abs() > 0.99);

    let e = embed_vlad(&codebook(&DMatrix::zeros(1, 2)), &set(&x), true, Some(&lcs)).unwrap();
    assert_eq!(e.component_dim, 1);
}

#[test]
fn sparse_clusters_fall_back_to_identity() {
    let centers = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 100.0, 100.0]);
    let mut r = rng(41);
    let mut x = gauss_matrix(&mut r, 30, 2);
    x[(0, 0)] = 101.0;
    x[(0, 1)] = 99.0;
    for variant in [LcsVariant::LcsWhiten, LcsVariant::LcsPlusPlus] {
        let lcs = fit_lcs(&codebook(&centers), &x, variant).unwrap();
        let t = &lcs.per_cluster[1];
        let expected = match variant {
            LcsVariant::LcsWhiten => DMatrix::identity(2, 2),
            LcsVariant::LcsPlusPlus => DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        };
        assert_eq!(t.matrix(), expected);
        assert_ne!(lcs.per_cluster[0].matrix(), DMatrix::identity(2, 2));
    }
}

#[test]
fn temb_whitening_drops_the_top_eigen_directions() {
    let (k, d) = (2, 2);
    let mut r = rng(42);
    let centers = gauss_matrix(&mut r, k, d);
    let train = gauss_matrix(&mut r, 500, d);
    let cb = codebook(&centers);
    let tw = fit_temb_whitening(&cb, &train).unwrap();
    assert_eq!((tw.dropped_leading, tw.dropped_trailing), (d, 0));
    assert_eq!(tw.output_dim(), k * d - d);

    let crow = rows_of(&centers);
    let raw: Mat = rows_of(&train).iter().map(|xt| temb_raw_oracle(&crow, xt)).collect();
    let (_, cov) = covariance(&raw);
    let (values, vectors) = jacobi_eigen(&cov);
    assert!(values[d - 1] - values[d] > 1e-3 * values[0], "needs an eigengap");
    let kept = rows_of(&tw.rotation);
    assert!(max_principal_sine(&kept, &vectors[d..].to_vec()) < 1e-6);

    // On the kept directions the training embeddings are white.
    let y: Mat = raw.iter().map(|v| mat_vec(&rows_of(&tw.matrix()), &sub(v, tw.mean.as_slice()))).collect();
    let (_, wcov) = covariance(&y);
    for i in 0..wcov.len() {
        for j in 0..wcov.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((wcov[i][j] - target).abs() < 1e-6);
        }
    }
}

#[test]
fn small_sample_temb_whitening_contract() {
    // 30 descriptors, K = 3: whitened raw embeddings have identity covariance.
    let mut r = rng(43);
    let centers = gauss_matrix(&mut r, 3, 2);
    let train = gauss_matrix(&mut r, 30, 2);
    let cb = codebook(&centers);
    let tw = fit_temb_whitening(&cb, &train).unwrap();
    let raw: Mat = rows_of(&train).iter().map(|xt| temb_raw_oracle(&rows_of(&centers), xt)).collect();
    let y = tw.apply(&from_rows(&raw)).unwrap();
    let (_, cov) = covariance(&rows_of(&y));
    for i in 0..cov.len() {
        assert!((cov[i][i] - 1.0).abs() < 1e-6);
    }
    assert_eq!(tw, fit_temb_whitening(&cb, &train).unwrap());
}

#[test]
fn dimension_checks() {
    let cb = codebook(&DMatrix::zeros(2, 3));
    let bad = DMatrix::zeros(4, 2);
    assert!(matches!(embed_vlad(&cb, &set(&bad), false, None), Err(Error::Precondition(_))));
    assert!(matches!(embed_temb(&cb, &set(&bad), None), Err(Error::Precondition(_))));
    assert!(matches!(fit_lcs(&cb, &bad, LcsVariant::LcsWhiten), Err(Error::Precondition(_))));
    assert!(matches!(fit_temb_whitening(&cb, &DMatrix::zeros(1, 3)), Err(Error::Precondition(_))));
}

proptest! {
    #[test]
    fn single_center_temb_equals_normalized_vlad(seed in 0u64..100_000, d in 1usize..8, n in 1usize..12) {
        let mut r = rng(seed);
        let cb = codebook(&gauss_matrix(&mut r, 1, d));
        let x = gauss_matrix(&mut r, n, d);
        let t = embed_temb(&cb, &set(&x), None).unwrap();
        let v = embed_vlad(&cb, &set(&x), true, None).unwrap();
        prop_assert_eq!(t.phi, v.phi);
    }

    #[test]
    fn vlad_sum_equals_residual_oracle(seed in 0u64..100_000, k in 1usize..6, d in 1usize..5) {
        let mut r = rng(seed);
        let centers = gauss_matrix(&mut r, k, d);
        let x = gauss_matrix(&mut r, 25, d);
        let e = embed_vlad(&codebook(&centers), &set(&x), false, None).unwrap();
        let pooled = sum_pool(&e).unwrap().psi;
        prop_assert!(max_abs_diff(pooled.as_slice(), &residual_sums(&rows_of(&centers), &rows_of(&x))) < 1e-12);
    }
}

//! Variational-equilibrium check: the stacked pseudo-gradient of the
//! principals' costs against feasible comparison points.

use super::simplex::{sample_simplex, simplex_from_slopes, SimplexDescription};
use super::Stencil;
use crate::error::{Error, Result};
use crate::market::{
    feasibility_unchecked, ContractParams, MarketModel, Matrix, DEFAULT_FEASIBILITY_TOL,
};
use crate::{par, stage2};

/// Stacked own-block gradients at `x`, as `(d/dc, d/da)` matrices. The
/// transfer block is exactly one everywhere; the slope block is a central
/// difference through `mu`.
pub fn pseudo_gradient(model: &MarketModel, x: &ContractParams) -> Result<(Matrix, Matrix)> {
    model.check_contract(x)?;
    let (m, n) = (model.n_principals(), model.n_agents());
    let slope = par::try_map_range(m * n, |t| {
        let (j, k) = (t / n, t % n);
        Ok::<_, Error>(Stencil::new(model, &x.a, j, k)?.apply(|s| s.slope_cost(j)))
    })?;
    Ok((
        Matrix::from_element(m, n, 1.0),
        Matrix::from_row_slice(m, n, &slope),
    ))
}

fn require_feasible(model: &MarketModel, p: &ContractParams, name: &str) -> Result<()> {
    model.check_contract(p)?;
    let mu = stage2::mu(model, &p.a)?;
    let rep = feasibility_unchecked(model, p, &mu, DEFAULT_FEASIBILITY_TOL);
    if !rep.feasible() {
        let ir = rep.ir_slack.iter().copied().fold(f64::INFINITY, f64::min);
        let pos = rep.payment_slack.min();
        return Err(Error::Domain(format!(
            "{name} is not in the feasible set (min IR slack {ir:.3e}, min payment {pos:.3e})"
        )));
    }
    Ok(())
}

/// `F(x)^T (y - x)` for the stacked pseudo-gradient `F`.
pub fn ve_inner_product(
    model: &MarketModel,
    x: &ContractParams,
    y: &ContractParams,
) -> Result<f64> {
    require_feasible(model, x, "x")?;
    require_feasible(model, y, "y")?;
    let (gc, ga) = pseudo_gradient(model, x)?;
    Ok(inner(&gc, &ga, x, y))
}

fn inner(gc: &Matrix, ga: &Matrix, x: &ContractParams, y: &ContractParams) -> f64 {
    let dc = &y.c - &x.c;
    let da = &y.a - &x.a;
    gc.component_mul(&dc).sum() + ga.component_mul(&da).sum()
}

/// Samples `k` pairs and checks `|F(x)^T (y - x)| <= tol` for each. `x` is
/// drawn from `desc`; `y` from the polytope recomputed from the model at
/// `desc.a_ref`, so a description that disagrees with the model shows up as
/// a nonzero inner product.
pub fn check_ve_on_simplex(
    model: &MarketModel,
    desc: &SimplexDescription,
    k: usize,
    seed: u64,
    tol: f64,
) -> Result<bool> {
    let reference = simplex_from_slopes(model, &desc.a_ref)?;
    let xs = sample_simplex(desc, k, seed)?;
    let ys = sample_simplex(&reference, k, seed ^ 0x5eed_0f7e57)?;
    let a = desc.a_ref.clone();
    let wrap = |c: Matrix| ContractParams { c, a: a.clone() };
    // One pseudo-gradient serves every pair: it only depends on the slopes.
    let first = wrap(xs[0].clone());
    require_feasible(model, &first, "x")?;
    let (gc, ga) = pseudo_gradient(model, &first)?;
    for (cx, cy) in xs.into_iter().zip(ys) {
        let (x, y) = (wrap(cx), wrap(cy));
        require_feasible(model, &x, "x")?;
        require_feasible(model, &y, "y")?;
        if inner(&gc, &ga, &x, &y).abs() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::super::testing::market;
    use super::*;

    fn worked() -> (MarketModel, SimplexDescription) {
        let model = market(2, 2, 1.0);
        let desc = simplex_from_slopes(&model, &Matrix::from_element(2, 2, 2.0)).unwrap();
        (model, desc)
    }

    #[test]
    fn same_point_is_zero() {
        let (model, desc) = worked();
        let x = ContractParams {
            c: desc.centroid(),
            a: desc.a_ref.clone(),
        };
        assert_eq!(ve_inner_product(&model, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn simplex_pairs_are_orthogonal() {
        let (model, desc) = worked();
        let cs = sample_simplex(&desc, 10, 4).unwrap();
        for w in cs.windows(2) {
            let x = ContractParams {
                c: w[0].clone(),
                a: desc.a_ref.clone(),
            };
            let y = ContractParams {
                c: w[1].clone(),
                a: desc.a_ref.clone(),
            };
            // Direct summation of the transfer differences.
            let direct: f64 = (&w[1] - &w[0]).sum();
            let v = ve_inner_product(&model, &x, &y).unwrap();
            assert!(v.abs() < 1e-8 && (v - direct).abs() < 1e-12);
        }
        assert!(check_ve_on_simplex(&model, &desc, 100, 1, 1e-8).unwrap());
    }

    #[test]
    fn leaving_the_feasible_set_is_rejected() {
        let (model, desc) = worked();
        let x = ContractParams {
            c: desc.centroid(),
            a: desc.a_ref.clone(),
        };
        let mut y = x.clone();
        y.c[(0, 0)] -= 0.1;
        y.c[(1, 0)] -= 0.1;
        assert!(matches!(
            ve_inner_product(&model, &x, &y),
            Err(Error::Domain(_))
        ));
        // Raising transfers stays feasible and costs more.
        let mut y = x.clone();
        y.c[(0, 0)] += 0.1;
        y.c[(1, 0)] += 0.1;
        assert!((ve_inner_product(&model, &x, &y).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn single_point_simplex() {
        let model = market(3, 1, 0.0);
        let desc = simplex_from_slopes(&model, &Matrix::from_element(1, 3, 0.4)).unwrap();
        assert!(check_ve_on_simplex(&model, &desc, 1, 0, 1e-8).unwrap());
    }

    #[test]
    fn corrupted_description_fails() {
        let (model, mut desc) = worked();
        for g in desc.g.iter_mut() {
            *g += 1.0;
        }
        assert!(!check_ve_on_simplex(&model, &desc, 10, 0, 1e-8).unwrap());
    }

    #[test]
    fn slope_block_matches_direct_difference() {
        let model = market(3, 2, 0.2);
        let a = Matrix::from_row_slice(2, 3, &[0.5, 1.0, 1.5, 0.2, 0.0, 0.8]);
        let x = ContractParams {
            c: simplex_from_slopes(&model, &a).unwrap().centroid(),
            a: a.clone(),
        };
        let (gc, ga) = pseudo_gradient(&model, &x).unwrap();
        assert!(gc.iter().all(|&v| v == 1.0));
        // Coarser independent difference quotient on the full expected cost.
        let cost = |a: &Matrix, j: usize| {
            let p = ContractParams {
                c: x.c.clone(),
                a: a.clone(),
            };
            let mu = crate::stage2::mu(&model, a).unwrap();
            crate::market::cost_unchecked(&model, &p, &mu, j)
        };
        for j in 0..2 {
            for k in 0..3 {
                let h = 1e-4;
                let mut up = a.clone();
                up[(j, k)] += h;
                let d = if a[(j, k)] >= h {
                    let mut dn = a.clone();
                    dn[(j, k)] -= h;
                    (cost(&up, j) - cost(&dn, j)) / (2.0 * h)
                } else {
                    let mut up2 = a.clone();
                    up2[(j, k)] += 2.0 * h;
                    (-3.0 * cost(&a, j) + 4.0 * cost(&up, j) - cost(&up2, j)) / (2.0 * h)
                };
                assert!(
                    (d - ga[(j, k)]).abs() < 1e-5 * (1.0 + d.abs()),
                    "{j},{k}: {d} vs {}",
                    ga[(j, k)]
                );
            }
        }
    }
}

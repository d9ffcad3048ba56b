use cvp_core::el::ell_dual_jet;
use cvp_core::jet::Jet;
use cvp_core::lagrangian::LagrangianModel;
use cvp_core::measure::DiscreteMeasure;
use nalgebra::{DMatrix, DVector};

/// `(ℓ̃, ∇ℓ̃)` on the support of `F_*(e^c ρ)` for the flat jet `(c, F − id)`, followed by `⟨k, jet⟩ − target`.
fn pinned_el_system(
    base: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    kernel: &Jet,
    target: f64,
    flat: &DVector<f64>,
) -> DVector<f64> {
    let jet = Jet::from_vector(base.dim(), flat).unwrap();
    let moved = base.push_forward(&jet.scalars(), &jet.vectors()).unwrap();
    assert_eq!(moved.len(), base.len(), "oracle iterate merged support points");
    let dual = ell_dual_jet(&moved, lag, nu).unwrap();
    let mut out: Vec<f64> = dual.as_slice().to_vec();
    out.push(kernel.dot(&jet) - target);
    DVector::from_vec(out)
}

/// Direct Gauss-Newton solve of the pointwise EL conditions `ℓ̃ = 0`, `∇ℓ̃ = 0` on the perturbed
/// support, with the kernel coordinate `⟨k, jet⟩` pinned to `target`.
pub fn pinned_nonlinear_solution(
    base: &DiscreteMeasure,
    lag: &LagrangianModel,
    nu: f64,
    kernel: &Jet,
    target: f64,
    start: &Jet,
) -> Jet {
    let mut x = start.to_vector();
    let n = x.len();
    for _ in 0..100 {
        let f = pinned_el_system(base, lag, nu, kernel, target, &x);
        if f.amax() < 1e-15 {
            break;
        }
        let h = 1e-7;
        let mut jac = DMatrix::zeros(f.len(), n);
        for c in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let col = (pinned_el_system(base, lag, nu, kernel, target, &xp)
                - pinned_el_system(base, lag, nu, kernel, target, &xm))
                / (2.0 * h);
            jac.set_column(c, &col);
        }
        let step = jac.svd(true, true).solve(&f, 1e-13).unwrap();
        x -= step;
    }
    let f = pinned_el_system(base, lag, nu, kernel, target, &x);
    assert!(f.amax() < 1e-13, "oracle did not converge: {}", f.amax());
    Jet::from_vector(base.dim(), &x).unwrap()
}

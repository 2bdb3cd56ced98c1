//! Random Fourier features: how closely `φ(x)ᵀφ(x′)` tracks the exact kernel
//! as the number of features grows, for each supported kernel family.

use iegp::harness::rf_approximation_error;
use iegp::kernels::{sample_feature_map, KernelFamily, KernelSpec, Lengthscale};

fn main() -> iegp::Result<()> {
    for family in [KernelFamily::Rbf, KernelFamily::Laplace, KernelFamily::Cauchy] {
        let spec = KernelSpec::new(family, Lengthscale::Isotropic(1.0), 1.0, 0.1, 2)?;
        print!("{family:?}:");
        for n_rf in [10, 50, 200, 800] {
            print!("  n_rf={n_rf} err={:.4}", rf_approximation_error(&spec, n_rf, 1, 200)?);
        }
        println!();
    }

    let spec = KernelSpec::rbf(0.5, 1.0, 0.1, 2)?;
    let map = sample_feature_map(&spec, 400, 7)?;
    let (a, b) = ([0.1, -0.2], [0.3, 0.4]);
    println!(
        "RBF l=0.5 at a pair of points: exact {:.4}, approximation {:.4} ({} features)",
        spec.standardized(&a, &b)?,
        map.kernel_approx(&a, &b)?,
        map.feature_dim()
    );
    Ok(())
}

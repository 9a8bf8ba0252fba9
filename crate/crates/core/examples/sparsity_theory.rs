//! Effective attention entries shrink as a fraction of the window as the
//! window widens, and mean attention decays exponentially with distance.

use chunkcomp::analysis::{decay_fit, decay_samples, sparsity_sweep, SparsitySource};

fn main() -> chunkcomp::Result<()> {
    let src = SparsitySource::synthetic();
    let curve = sparsity_sweep(src, &[64, 128, 256, 512], 0.01, 20, 1)?;
    for s in curve.summary() {
        println!(
            "w={:<4} effective {:>6.1} +- {:<5.1} fraction {:.3}",
            s.w,
            s.effective_mean,
            s.effective_std,
            s.effective_mean / s.w as f64
        );
    }
    let t = curve.trend();
    println!("decreasing fraction in {}/{} trials (pass: {})", t.passing, t.trials, t.pass());

    let fit = decay_fit(&decay_samples(src, 128, 20, 1)?)?;
    println!("decay rate {:.3} (alpha 0.5), r^2 {:.4}", fit.rate, fit.r_squared);
    Ok(())
}

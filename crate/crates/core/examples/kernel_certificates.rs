//! Finite-range checks of kernel and diffusion hypotheses, with witnesses
//! when they fail.

use smolkit::kernels::{
    check_bounded_below, check_power_bracket, check_vanishing_ratio, kinetic_kernel_from_range, DiffusionProfile,
    Kernel, RangeProfile,
};

fn main() -> smolkit::Result<()> {
    let n = 256;
    let dp = DiffusionProfile::power_law(1.0, 1.0 / 3.0, n)?;

    let sum = Kernel::sum(1.0, n)?;
    println!("sum kernel, power bracket: {}", check_power_bracket(&sum, &dp, 1.0, 1.0, 1.0 / 3.0, 1.0, 1.0 / 3.0, n)?);
    println!("sum kernel, bounded below: {}", check_bounded_below(&sum, &dp, 1.0, n)?);

    let root_sum = Kernel::sum_power(1.0, 0.5, n)?;
    println!("(n+m)^0.5, vanishing ratio (delta = 0.5): {}", check_vanishing_ratio(&root_sum, &dp, 0.5, n)?);
    for a in [0.25, 0.5] {
        let k = Kernel::product(a, n)?;
        println!("(nm)^{a}, vanishing ratio (delta = 0.5): {}", check_vanishing_ratio(&k, &dp, 0.5, n)?);
    }

    let product = Kernel::product(1.0, n)?;
    println!("nm, power bracket: {}", check_power_bracket(&product, &dp, 1.0, 1.0, 1.0 / 3.0, 1.0, 1.0 / 3.0, n)?);

    let range = RangeProfile::new(1.0 / 3.0, 1.0)?;
    let kinetic = kinetic_kernel_from_range(&dp, &range, 3, 1.0)?;
    println!("kinetic kernel: alpha(1,1) = {:.4}, alpha(8,8) = {:.4}", kinetic.get(1, 1), kinetic.get(8, 8));
    println!("kinetic kernel, bounded below: {}", check_bounded_below(&kinetic, &dp, 4.0, n)?);

    let rising = DiffusionProfile::custom((1..=n).map(|i| 1.0 + (i == 7) as u8 as f64).collect())?;
    println!("bumped d, bounded below: {}", check_bounded_below(&sum, &rising, 1.0, n)?);
    Ok(())
}

//! The scalar function whose derivative is the clipped, preconditioned
//! gradient of `½(Ax − b)²`.
//!
//! cargo run --example huberized_loss

use fedclip::fixedpoint::{huberized_derivative, huberized_loss};

fn main() -> fedclip::Result<()> {
    let (lambda, a, b, c) = (0.5, 2.0, 1.0, 0.6);
    println!("{:>6} {:>10} {:>10} {:>12}", "x", "h(x)", "h'(x)", "Lambda*f'(x)");
    for k in -8..=8 {
        let x = k as f64 * 0.25;
        println!(
            "{x:>6.2} {:>10.5} {:>10.5} {:>12.5}",
            huberized_loss(lambda, a, b, c, x)?,
            huberized_derivative(lambda, a, b, c, x)?,
            lambda * a * (a * x - b)
        );
    }
    Ok(())
}

//! Stationary points of FedAvg with per-client clipping on the slope
//! ensemble, from the fixed-point solver and from simulation.
//!
//! cargo run --example table1

use fedclip::runner::{table1, Table1Settings};

fn main() -> fedclip::Result<()> {
    let table = table1(&Table1Settings::default())?;
    println!("{:>5} {:>6} {:>14} {:>14} {:>8}", "c", "Q", "solver", "simulation", "sim Q");
    for cell in &table.cells {
        let q = cell.local_steps.map_or("inf".to_string(), |q| q.to_string());
        println!(
            "{:>5} {:>6} {:>14.10} {:>14.10} {:>8}",
            cell.c, q, cell.solver, cell.simulation, cell.simulated_local_steps
        );
    }
    Ok(())
}

//! Fock basis of a half-filled ring and the position of a product state in it.
//!
//! `cargo run --example basis -- "-+-+"`

use nonergodic::fock::{FockBasis, Spin, SpinPattern};

fn main() -> nonergodic::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| "-+-".into());
    let pattern: SpinPattern = text.parse()?;
    let basis = FockBasis::new(pattern.len(), pattern.n_up(), pattern.n_down())?;
    println!("pattern {text} -> {pattern}");
    println!(
        "N = {}, {} up / {} down, dimension {} x {} = {}",
        basis.lattice_size(),
        basis.n_up(),
        basis.n_down(),
        basis.dim_up(),
        basis.dim_down(),
        basis.dimension()
    );
    let a = basis.tuple_index(Spin::Up, &pattern.up_sites())?;
    let b = basis.tuple_index(Spin::Down, &pattern.down_sites())?;
    println!("up sites {:?} -> index {a}", pattern.up_sites());
    println!("down sites {:?} -> index {b}", pattern.down_sites());
    assert_eq!(basis.pattern_of(a, b), pattern);

    for n in (6..=14).step_by(2) {
        println!("half filling N = {n:>2}: {}", FockBasis::half_filled(n)?.dimension());
    }
    Ok(())
}

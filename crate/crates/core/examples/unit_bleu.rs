//! Corpus BLEU on unit sequences.
use ctc_s2ut::bleu::unit_bleu;
use ctc_s2ut::units::UnitSequence;

fn main() -> ctc_s2ut::Result<()> {
    let seq = |s: &str| s.parse::<UnitSequence>();
    let refs = vec![seq("0 1 2 3 4")?, seq("5 6 7")?];
    let exact = refs.clone();
    let short = vec![seq("0 1 2 3")?, seq("5 6 7")?];
    let swapped = vec![seq("0 2 1 3 4")?, seq("5 7 6")?];
    println!("identical   {:.4}", unit_bleu(&exact, &refs)?);
    println!("too short   {:.4}", unit_bleu(&short, &refs)?);
    println!("local swaps {:.4}", unit_bleu(&swapped, &refs)?);
    Ok(())
}

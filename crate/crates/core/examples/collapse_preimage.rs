//! The collapse function and its brute-force preimage.
use ctc_s2ut::units::{collapse, enumerate_preimage, min_alignment_length, Alignment, UnitSequence, UnitVocab, DEFAULT_ENUMERATION_CAP};

fn main() -> ctc_s2ut::Result<()> {
    let vocab = UnitVocab::new(2)?; // units 0 and 1, blank = 2
    let a = Alignment::new(vec![0, 0, 2, 0, 1, 1, 2], vocab)?;
    println!("collapse({:?}) = [{}]", a.tokens(), collapse(&a, vocab)?);

    let y: UnitSequence = "0 0".parse()?;
    println!("min alignment length for [{y}] = {}", min_alignment_length(&y));
    for t in 2..=4 {
        let pre = enumerate_preimage(&y, t, vocab, DEFAULT_ENUMERATION_CAP)?;
        println!("T={t}: {} alignments", pre.len());
        for a in pre {
            println!("  {:?}", a.tokens());
        }
    }
    Ok(())
}

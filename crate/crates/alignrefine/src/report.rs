//! Plain-text decode report: reference, first-pass hypothesis and each
//! refinement step, with edit tags in place of colour. A substituted token
//! prints as `S:h`, an inserted one as `I:h`, and a deleted reference token
//! as `D:r`; correct tokens print bare.

use std::fmt::Write as _;

use alignrefine_core::align::{edit_script, format_tokens, Alignment, EditCounts, EditOp, LabelSequence, Vocab};
use alignrefine_core::train::UtteranceDecode;

/// Hypothesis tokens tagged against the reference, plus the edit counts.
pub fn tag_tokens(reference: &[usize], hyp: &[usize]) -> (String, EditCounts) {
    let mut counts = EditCounts::default();
    let words: Vec<String> = edit_script(reference, hyp)
        .into_iter()
        .map(|op| match op {
            EditOp::Match { h, .. } => hyp[h].to_string(),
            EditOp::Sub { h, .. } => {
                counts.subs += 1;
                format!("S:{}", hyp[h])
            }
            EditOp::Ins { h } => {
                counts.ins += 1;
                format!("I:{}", hyp[h])
            }
            EditOp::Del { r } => {
                counts.dels += 1;
                format!("D:{}", reference[r])
            }
        })
        .collect();
    (words.join(" "), counts)
}

fn line(out: &mut String, label: &str, reference: &LabelSequence, hyp: &LabelSequence, ali: &Alignment, vocab: Vocab) {
    let (tagged, c) = tag_tokens(&reference.0, &hyp.0);
    let _ = writeln!(out, "{label:<7} {tagged}");
    let _ = writeln!(out, "{:<7} align: {}  [S={} I={} D={}]", "", format_tokens(&ali.0, vocab), c.subs, c.ins, c.dels);
}

pub fn decode_report(id: &str, reference: &LabelSequence, d: &UtteranceDecode, vocab: Vocab) -> String {
    let mut out = format!("utt {id}\n");
    let _ = writeln!(out, "{:<7} {}", "ref", format_tokens(&reference.0, vocab));
    line(&mut out, "first", reference, &d.first, &d.first_alignment, vocab);
    for (k, (hyp, ali)) in d.steps.iter().zip(&d.step_alignments).enumerate() {
        line(&mut out, &format!("step{}", k + 1), reference, hyp, ali, vocab);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alignrefine_core::align::edit_distance;
    use alignrefine_core::numcore::Rng;

    #[test]
    fn identical_sequences_have_no_markers() {
        let (t, c) = tag_tokens(&[3, 1, 4], &[3, 1, 4]);
        assert_eq!(t, "3 1 4");
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn single_substitution_is_marked_in_place() {
        let (t, _) = tag_tokens(&[3, 1, 4], &[3, 2, 4]);
        assert_eq!(t, "3 S:2 4");
        assert_eq!(tag_tokens(&[3, 1, 4], &[3, 4]).0, "3 D:1 4");
        assert_eq!(tag_tokens(&[3, 4], &[3, 9, 4]).0, "3 I:9 4");
    }

    #[test]
    fn marker_counts_equal_edit_distance() {
        let mut rng = Rng::new(6);
        for _ in 0..300 {
            let r: Vec<usize> = (0..rng.range_inclusive(0, 7)).map(|_| rng.range_inclusive(1, 4)).collect();
            let h: Vec<usize> = (0..rng.range_inclusive(0, 7)).map(|_| rng.range_inclusive(1, 4)).collect();
            let (t, c) = tag_tokens(&r, &h);
            let expected = edit_distance(&LabelSequence(r.clone()), &LabelSequence(h.clone()));
            assert_eq!(c, expected);
            let count = |p: &str| t.split(' ').filter(|w| w.starts_with(p)).count();
            assert_eq!((count("S:"), count("I:"), count("D:")), (c.subs, c.ins, c.dels));
        }
    }

    #[test]
    fn report_lists_every_step() {
        let vocab = Vocab::new(4);
        let d = UtteranceDecode {
            first: LabelSequence(vec![1, 3]),
            first_alignment: Alignment(vec![1, 0, 3, 0]),
            steps: vec![LabelSequence(vec![1, 2]), LabelSequence(vec![1, 2])],
            step_alignments: vec![Alignment(vec![1, 0, 2, 0]), Alignment(vec![1, 0, 2, 0])],
        };
        let text = decode_report("dev-3", &LabelSequence(vec![1, 2]), &d, vocab);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "utt dev-3");
        assert_eq!(lines[1], "ref     1 2");
        assert_eq!(lines[2], "first   1 S:3");
        assert_eq!(lines[3], "        align: 1 _ 3 _  [S=1 I=0 D=0]");
        assert_eq!(lines[4], "step1   1 2");
        assert_eq!(lines.len(), 8);
    }
}

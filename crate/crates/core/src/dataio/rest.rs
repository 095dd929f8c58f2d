use crate::dsp::{Label, Recording};

const MIN_REST_S: f64 = 1.0;

/// Rest intervals from the gaps around move events. Each gap (including the
/// stretches before the first and after the last move) is shrunk by
/// `guard_s` on both sides; anything shorter than one second is dropped.
pub fn extract_rest_epochs(rec: &Recording, guard_s: f64) -> Vec<(usize, usize)> {
    let fs = rec.sample_rate;
    let guard = (guard_s.max(0.0) * fs).round() as usize;
    let min_len = (MIN_REST_S * fs).round() as usize;
    let mut moves: Vec<(usize, usize)> = rec
        .events
        .iter()
        .filter(|e| e.label == Label::Move)
        .map(|e| (e.start, e.end))
        .collect();
    moves.sort_unstable();
    let mut gaps = Vec::with_capacity(moves.len() + 1);
    let mut cursor = 0;
    for &(s, e) in &moves {
        if s > cursor {
            gaps.push((cursor, s));
        }
        cursor = cursor.max(e);
    }
    if rec.n_samples() > cursor {
        gaps.push((cursor, rec.n_samples()));
    }
    gaps.into_iter()
        .filter_map(|(s, e)| {
            let (s, e) = (s + guard, e.saturating_sub(guard));
            (e > s && e - s >= min_len).then_some((s, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Event;
    use ndarray::Array2;

    fn rec(n: usize, moves: &[(usize, usize)]) -> Recording {
        let events = moves.iter().map(|&(start, end)| Event { start, end, label: Label::Move }).collect();
        Recording::new(vec!["C".into()], 250.0, Array2::zeros((1, n)), events).unwrap()
    }

    #[test]
    fn gap_between_moves() {
        assert_eq!(extract_rest_epochs(&rec(2000, &[(0, 500), (1500, 2000)]), 0.5), vec![(625, 1375)]);
    }

    #[test]
    fn short_gap_dropped() {
        assert!(extract_rest_epochs(&rec(1200, &[(0, 500), (700, 1200)]), 0.5).is_empty());
    }

    #[test]
    fn no_moves_whole_recording() {
        assert_eq!(extract_rest_epochs(&rec(3000, &[]), 1.0), vec![(250, 2750)]);
    }
}

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::staggering::{staggering, StaggeringSample};

pub const TRACE_HEADER: &str = "interval,timestamp_ns,head_instr,trail_instr,staggering,action";

/// Writes samples as CSV: header first, then one row per sample.
pub fn write_samples<W: Write>(samples: &[StaggeringSample], mut sink: W) -> Result<()> {
    writeln!(sink, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            s.interval_index, s.timestamp_ns, s.head_count, s.trail_count, s.staggering, s.action
        )?;
    }
    sink.flush()?;
    Ok(())
}

/// Parses trace CSV back into samples, checking that each row's staggering
/// equals its head minus trail count.
pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<StaggeringSample>> {
    let mut samples = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            if line?.trim_end() != TRACE_HEADER {
                return Err(Error::parse(1, format!("expected header {TRACE_HEADER:?}")));
            }
        }
        None => return Err(Error::parse(1, "missing header")),
    }
    for (n, line) in lines {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 6 {
            return Err(Error::parse(line_no, format!("expected 6 fields, found {}", fields.len())));
        }
        let unsigned = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("field {i} {:?}: {e}", fields[i])))
        };
        let sample = StaggeringSample {
            interval_index: unsigned(0)?,
            timestamp_ns: unsigned(1)?,
            head_count: unsigned(2)?,
            trail_count: unsigned(3)?,
            staggering: fields[4]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("staggering {:?}: {e}", fields[4])))?,
            action: fields[5].parse().map_err(|e: String| Error::parse(line_no, e))?,
        };
        if staggering(sample.head_count, sample.trail_count)? != sample.staggering {
            return Err(Error::parse(line_no, "staggering is not head_instr - trail_instr"));
        }
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staggering::Action;
    use proptest::prelude::*;

    fn render(samples: &[StaggeringSample]) -> String {
        let mut out = Vec::new();
        write_samples(samples, &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(render(&[]), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn row_format() {
        let s = StaggeringSample::new(3, 1000, 950_000_000, 740_000_000, Action::Resume).unwrap();
        let text = render(&[s]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "3,1000,950000000,740000000,210000000,RESUME");
    }

    #[test]
    fn negative_staggering_has_minus_sign() {
        let s = StaggeringSample::new(1, 5, 100, 250, Action::DiversityLoss).unwrap();
        assert!(render(&[s]).ends_with("1,5,100,250,-150,DIVERSITY_LOSS\n"));
    }

    #[test]
    fn rejects_inconsistent_rows() {
        let text = format!("{TRACE_HEADER}\n1,0,10,5,4,NONE\n");
        assert!(matches!(read_samples(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_samples("bogus\n".as_bytes()).is_err());
        let text = format!("{TRACE_HEADER}\n1,0,10,5,5,STOP\n");
        assert!(read_samples(text.as_bytes()).is_err());
    }

    fn any_action() -> impl Strategy<Value = Action> {
        proptest::sample::select(Action::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec((0u64..1 << 40, 0u64..1 << 40, any_action()), 0..40)) {
            let samples: Vec<_> = rows
                .iter()
                .enumerate()
                .map(|(i, &(h, t, a))| StaggeringSample::new(i as u64 + 1, i as u64 * 1000, h, t, a).unwrap())
                .collect();
            let text = render(&samples);
            prop_assert_eq!(read_samples(text.as_bytes()).unwrap(), samples);
        }
    }
}

//! Byte-exact comparison of replica outputs, and fault injection used to
//! show that comparison catches corruption.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::replication::{PendingFlip, ReplicaSession};
use crate::verdict::{MismatchLocation, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Comparison {
    Match,
    Mismatch(Vec<MismatchLocation>),
}

/// Compares two output sets buffer by buffer.
///
/// A mismatch lists, for each differing buffer, only the first differing
/// byte offset.
pub fn compare_outputs<A, B>(a: &[A], b: &[B], sizes: &[usize]) -> Result<Comparison>
where
    A: AsRef<[u8]>,
    B: AsRef<[u8]>,
{
    if a.len() != sizes.len() || b.len() != sizes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} and {} buffers for {} declared outputs",
            a.len(),
            b.len(),
            sizes.len()
        )));
    }
    let mut locations = Vec::new();
    for (index, ((x, y), &size)) in a.iter().zip(b).zip(sizes).enumerate() {
        let (x, y) = (x.as_ref(), y.as_ref());
        if x.len() != size || y.len() != size {
            return Err(Error::ShapeMismatch(format!(
                "output {index}: declared {size} bytes, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        if let Some(byte_offset) = x.iter().zip(y).position(|(p, q)| p != q) {
            locations.push(MismatchLocation {
                output_index: index,
                byte_offset,
            });
        }
    }
    Ok(if locations.is_empty() {
        Comparison::Match
    } else {
        Comparison::Mismatch(locations)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    /// Flip one bit of the target's output after it exits, before collection.
    BitFlip {
        output_index: usize,
        byte_offset: usize,
        bit_index: u8,
    },
    /// Stop the target for `duration`, starting `start_after` from injection.
    Freeze { duration: Duration, start_after: Duration },
    /// Kill the target, immediately or once the monitor samples it past
    /// `after_instructions` (so the crash point is approximate).
    Crash { after_instructions: Option<u64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaultSpec {
    pub target: Role,
    pub kind: FaultKind,
    pub seed: u64,
}

impl FaultSpec {
    pub fn bit_flip(target: Role, output_index: usize, byte_offset: usize, bit_index: u8) -> Self {
        FaultSpec {
            target,
            kind: FaultKind::BitFlip {
                output_index,
                byte_offset,
                bit_index,
            },
            seed: 0,
        }
    }

    pub fn freeze(target: Role, duration: Duration) -> Self {
        FaultSpec {
            target,
            kind: FaultKind::Freeze {
                duration,
                start_after: Duration::ZERO,
            },
            seed: 0,
        }
    }

    pub fn crash(target: Role) -> Self {
        FaultSpec {
            target,
            kind: FaultKind::Crash {
                after_instructions: None,
            },
            seed: 0,
        }
    }

    /// Checks the coordinates of a bit flip against the declared output sizes.
    pub fn validate(&self, output_sizes: &[usize]) -> Result<()> {
        if let FaultKind::BitFlip {
            output_index,
            byte_offset,
            bit_index,
        } = self.kind
        {
            let size = output_sizes.get(output_index).ok_or_else(|| {
                Error::InvalidCoordinates(format!(
                    "output {output_index} does not exist ({} outputs)",
                    output_sizes.len()
                ))
            })?;
            if byte_offset >= *size {
                return Err(Error::InvalidCoordinates(format!(
                    "byte {byte_offset} is outside output {output_index} of {size} bytes"
                )));
            }
            if bit_index > 7 {
                return Err(Error::InvalidCoordinates(format!("bit {bit_index} is not in 0..=7")));
            }
        }
        Ok(())
    }

    /// Every single-bit flip of `role`'s outputs, in output/byte/bit order.
    pub fn all_bit_flips(role: Role, output_sizes: &[usize]) -> impl Iterator<Item = FaultSpec> + '_ {
        output_sizes.iter().enumerate().flat_map(move |(o, &size)| {
            (0..size).flat_map(move |b| (0..8u8).map(move |bit| FaultSpec::bit_flip(role, o, b, bit)))
        })
    }

    /// `count` bit flips at pseudo-random coordinates derived from `seed`.
    pub fn random_bit_flips(role: Role, output_sizes: &[usize], count: usize, seed: u64) -> Vec<FaultSpec> {
        let total_bits: u64 = output_sizes.iter().map(|&s| s as u64 * 8).sum();
        if total_bits == 0 {
            return Vec::new();
        }
        let mut state = seed;
        (0..count)
            .map(|_| {
                let mut bit = splitmix64(&mut state) % total_bits;
                let mut output_index = 0;
                while bit >= output_sizes[output_index] as u64 * 8 {
                    bit -= output_sizes[output_index] as u64 * 8;
                    output_index += 1;
                }
                let mut fault = FaultSpec::bit_flip(role, output_index, (bit / 8) as usize, (bit % 8) as u8);
                fault.seed = seed;
                fault
            })
            .collect()
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies `fault` to a live session.
pub fn inject_fault(session: &mut ReplicaSession, fault: &FaultSpec) -> Result<()> {
    fault.validate(session.output_sizes())?;
    match fault.kind {
        FaultKind::BitFlip {
            output_index,
            byte_offset,
            bit_index,
        } => session.schedule_flip(PendingFlip {
            role: fault.target,
            output_index,
            byte_offset,
            bit_index,
        }),
        FaultKind::Freeze {
            duration,
            start_after,
        } => session.freeze(fault.target, start_after, duration)?,
        FaultKind::Crash {
            after_instructions: None,
        } => session.kill(fault.target)?,
        FaultKind::Crash {
            after_instructions: Some(n),
        } => session.add_crash_trigger(fault.target, n),
    }
    Ok(())
}

/// Parses durations such as `3ms`, `250us`, `2s` or `1500ns`.
pub fn parse_duration(s: &str) -> std::result::Result<Duration, String> {
    let split = s
        .find(|c: char| !c.is_ascii_digit())
        .ok_or_else(|| format!("duration {s:?} needs a unit (ns, us, ms, s)"))?;
    let (digits, unit) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|e| format!("duration {s:?}: {e}"))?;
    match unit {
        "ns" => Ok(Duration::from_nanos(n)),
        "us" => Ok(Duration::from_micros(n)),
        "ms" => Ok(Duration::from_millis(n)),
        "s" => Ok(Duration::from_secs(n)),
        _ => Err(format!("unknown duration unit {unit:?} in {s:?}")),
    }
}

fn format_duration(d: Duration) -> String {
    let ns = d.as_nanos();
    if ns.is_multiple_of(1_000_000_000) {
        format!("{}s", ns / 1_000_000_000)
    } else if ns.is_multiple_of(1_000_000) {
        format!("{}ms", ns / 1_000_000)
    } else if ns.is_multiple_of(1000) {
        format!("{}us", ns / 1000)
    } else {
        format!("{ns}ns")
    }
}

/// `bitflip:<role>:<output>:<byte>:<bit>`, `freeze:<role>:<duration>[@<start>]`,
/// `crash:<role>[:<after_instructions>]`.
impl FromStr for FaultSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let role = |i: usize| -> std::result::Result<Role, String> {
            parts
                .get(i)
                .ok_or_else(|| format!("fault {s:?} is missing its target"))?
                .parse()
        };
        let num = |i: usize| -> std::result::Result<u64, String> {
            parts
                .get(i)
                .ok_or_else(|| format!("fault {s:?} has too few fields"))?
                .parse()
                .map_err(|e| format!("fault {s:?}: {e}"))
        };
        let fault = match parts[0] {
            "bitflip" if parts.len() == 5 => {
                let bit = num(4)?;
                if bit > 7 {
                    return Err(format!("fault {s:?}: bit index must be in 0..=7"));
                }
                FaultSpec::bit_flip(role(1)?, num(2)? as usize, num(3)? as usize, bit as u8)
            }
            "freeze" if parts.len() == 3 => {
                let (duration, start) = match parts[2].split_once('@') {
                    Some((d, at)) => (parse_duration(d)?, parse_duration(at)?),
                    None => (parse_duration(parts[2])?, Duration::ZERO),
                };
                FaultSpec {
                    target: role(1)?,
                    kind: FaultKind::Freeze {
                        duration,
                        start_after: start,
                    },
                    seed: 0,
                }
            }
            "crash" if parts.len() == 2 => FaultSpec::crash(role(1)?),
            "crash" if parts.len() == 3 => FaultSpec {
                target: role(1)?,
                kind: FaultKind::Crash {
                    after_instructions: Some(num(2)?),
                },
                seed: 0,
            },
            _ => return Err(format!("cannot parse fault {s:?}")),
        };
        Ok(fault)
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FaultKind::BitFlip {
                output_index,
                byte_offset,
                bit_index,
            } => write!(f, "bitflip:{}:{output_index}:{byte_offset}:{bit_index}", self.target),
            FaultKind::Freeze {
                duration,
                start_after,
            } if start_after.is_zero() => write!(f, "freeze:{}:{}", self.target, format_duration(duration)),
            FaultKind::Freeze {
                duration,
                start_after,
            } => write!(
                f,
                "freeze:{}:{}@{}",
                self.target,
                format_duration(duration),
                format_duration(start_after)
            ),
            FaultKind::Crash {
                after_instructions: None,
            } => write!(f, "crash:{}", self.target),
            FaultKind::Crash {
                after_instructions: Some(n),
            } => write!(f, "crash:{}:{n}", self.target),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loc(output_index: usize, byte_offset: usize) -> MismatchLocation {
        MismatchLocation {
            output_index,
            byte_offset,
        }
    }

    #[test]
    fn identical_outputs_match() {
        let a = vec![vec![1u8, 2], vec![3], vec![4, 5, 6]];
        assert_eq!(compare_outputs(&a, &a.clone(), &[2, 1, 3]).unwrap(), Comparison::Match);
    }

    #[test]
    fn single_flip_is_located() {
        let a = vec![vec![0u8; 4], vec![0u8; 16]];
        let mut b = a.clone();
        b[1][7] ^= 1;
        assert_eq!(
            compare_outputs(&a, &b, &[4, 16]).unwrap(),
            Comparison::Mismatch(vec![loc(1, 7)])
        );
    }

    #[test]
    fn empty_lists_match() {
        let none: Vec<Vec<u8>> = Vec::new();
        assert_eq!(compare_outputs(&none, &none, &[]).unwrap(), Comparison::Match);
    }

    #[test]
    fn first_offset_per_buffer_only() {
        let a = vec![vec![0u8; 8], vec![0u8; 8]];
        let b = vec![vec![0, 0, 1, 1, 1, 0, 0, 0], vec![0, 0, 0, 0, 0, 0, 0, 9]];
        assert_eq!(
            compare_outputs(&a, &b, &[8, 8]).unwrap(),
            Comparison::Mismatch(vec![loc(0, 2), loc(1, 7)])
        );
    }

    #[test]
    fn shape_errors() {
        let a = vec![vec![0u8; 2]];
        assert!(matches!(compare_outputs(&a, &a, &[3]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(compare_outputs(&a, &a, &[2, 2]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fault_parsing() {
        assert_eq!(
            "bitflip:trail:0:0:3".parse::<FaultSpec>().unwrap(),
            FaultSpec::bit_flip(Role::Trail, 0, 0, 3)
        );
        assert_eq!(
            "freeze:head:3ms".parse::<FaultSpec>().unwrap(),
            FaultSpec::freeze(Role::Head, Duration::from_millis(3))
        );
        assert_eq!("crash:head".parse::<FaultSpec>().unwrap(), FaultSpec::crash(Role::Head));
        for text in [
            "bitflip:trail:0:0:3",
            "freeze:head:3ms",
            "freeze:trail:250us@10ms",
            "crash:head",
            "crash:trail:1000000",
        ] {
            assert_eq!(text.parse::<FaultSpec>().unwrap().to_string(), text);
        }
        for bad in ["bitflip:trail:0:0:8", "bitflip:middle:0:0:1", "freeze:head:3", "melt:head", "crash"] {
            assert!(bad.parse::<FaultSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn coordinates_are_validated() {
        let sizes = [4, 0];
        assert!(FaultSpec::bit_flip(Role::Head, 0, 3, 7).validate(&sizes).is_ok());
        assert!(FaultSpec::bit_flip(Role::Head, 0, 4, 0).validate(&sizes).is_err());
        assert!(FaultSpec::bit_flip(Role::Head, 1, 0, 0).validate(&sizes).is_err());
        assert!(FaultSpec::bit_flip(Role::Head, 2, 0, 0).validate(&sizes).is_err());
        assert!(FaultSpec::bit_flip(Role::Head, 0, 0, 8).validate(&sizes).is_err());
    }

    #[test]
    fn exhaustive_flip_enumeration() {
        let flips: Vec<_> = FaultSpec::all_bit_flips(Role::Trail, &[16]).collect();
        assert_eq!(flips.len(), 128);
        assert!(flips.iter().all(|f| f.validate(&[16]).is_ok()));
        let random = FaultSpec::random_bit_flips(Role::Head, &[3, 0, 5], 200, 42);
        assert!(random.iter().all(|f| f.validate(&[3, 0, 5]).is_ok()));
        assert_eq!(random, FaultSpec::random_bit_flips(Role::Head, &[3, 0, 5], 200, 42));
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("3ms").unwrap(), Duration::from_millis(3));
        assert_eq!(parse_duration("7us").unwrap(), Duration::from_micros(7));
        assert_eq!(parse_duration("2s").unwrap(), Duration::from_secs(2));
        assert!(parse_duration("2").is_err());
        assert!(parse_duration("2h").is_err());
    }

    proptest! {
        #[test]
        fn every_single_flip_is_detected(data in proptest::collection::vec(any::<u8>(), 1..64), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
            let offset = pick.index(data.len());
            let mut flipped = data.clone();
            flipped[offset] ^= 1 << bit;
            let sizes = [data.len()];
            prop_assert_eq!(
                compare_outputs(&[&data], &[&flipped], &sizes).unwrap(),
                Comparison::Mismatch(vec![loc(0, offset)])
            );
        }

        #[test]
        fn match_is_symmetric(a in proptest::collection::vec(any::<u8>(), 0..16), b in proptest::collection::vec(any::<u8>(), 0..16)) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ab = compare_outputs(&[a], &[b], &[n]).unwrap();
            let ba = compare_outputs(&[b], &[a], &[n]).unwrap();
            prop_assert_eq!(ab == Comparison::Match, ba == Comparison::Match);
            prop_assert_eq!(ab, ba);
        }
    }
}

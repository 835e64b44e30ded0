use crate::error::{Error, Result};

/// The data handed to a protected computation: ordered inputs and the sizes
/// of the outputs it must produce.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PayloadSpec {
    pub inputs: Vec<Vec<u8>>,
    pub output_sizes: Vec<usize>,
}

impl PayloadSpec {
    pub fn new(inputs: Vec<Vec<u8>>, output_sizes: Vec<usize>) -> Self {
        PayloadSpec {
            inputs,
            output_sizes,
        }
    }

    /// Builds a payload from parallel buffer/size lists, checking that every
    /// declared size matches its buffer.
    pub fn from_parts(inputs: &[&[u8]], input_sizes: &[usize], output_sizes: &[usize]) -> Result<Self> {
        if inputs.len() != input_sizes.len() {
            return Err(Error::InvalidPayload(format!(
                "{} input buffers but {} input sizes",
                inputs.len(),
                input_sizes.len()
            )));
        }
        for (i, (buf, &size)) in inputs.iter().zip(input_sizes).enumerate() {
            if buf.len() != size {
                return Err(Error::InvalidPayload(format!(
                    "input {i} declared {size} bytes but buffer holds {}",
                    buf.len()
                )));
            }
        }
        Ok(PayloadSpec {
            inputs: inputs.iter().map(|b| b.to_vec()).collect(),
            output_sizes: output_sizes.to_vec(),
        })
    }

    pub fn input_sizes(&self) -> Vec<usize> {
        self.inputs.iter().map(Vec::len).collect()
    }

    pub fn total_input_bytes(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }

    pub fn total_output_bytes(&self) -> usize {
        self.output_sizes.iter().sum()
    }
}

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ledger::LABEL_BYTES;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ModelBroadcast,
    SmashedUpload,
    GradDown,
    ClientModelUpload,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::ModelBroadcast => "model_broadcast",
            MessageKind::SmashedUpload => "smashed_upload",
            MessageKind::GradDown => "grad_down",
            MessageKind::ClientModelUpload => "client_model_upload",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MessageKind::SmashedUpload | MessageKind::ClientModelUpload => Direction::Uplink,
            MessageKind::ModelBroadcast | MessageKind::GradDown => Direction::Downlink,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmashedUpload {
    pub client: usize,
    pub batch_id: u64,
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradDown {
    pub client: usize,
    pub batch_id: u64,
    pub d_smashed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientModelUpload {
    pub client: usize,
    pub x_c: ParamSet,
    pub a_c: Option<ParamSet>,
}

/// Everything that crosses the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Global client-side model (and aux head) sent to one participant.
    ModelBroadcast {
        client: usize,
        x_c: ParamSet,
        a_c: Option<ParamSet>,
    },
    SmashedUpload(SmashedUpload),
    GradDown(GradDown),
    ClientModelUpload(ClientModelUpload),
}

fn model_elements(x_c: &ParamSet, a_c: Option<&ParamSet>) -> usize {
    x_c.param_count() + a_c.map_or(0, ParamSet::param_count)
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::ModelBroadcast { .. } => MessageKind::ModelBroadcast,
            Message::SmashedUpload(_) => MessageKind::SmashedUpload,
            Message::GradDown(_) => MessageKind::GradDown,
            Message::ClientModelUpload(_) => MessageKind::ClientModelUpload,
        }
    }

    pub fn direction(&self) -> Direction {
        self.kind().direction()
    }

    /// The client on the other end.
    pub fn client(&self) -> usize {
        match self {
            Message::ModelBroadcast { client, .. } => *client,
            Message::SmashedUpload(u) => u.client,
            Message::GradDown(g) => g.client,
            Message::ClientModelUpload(u) => u.client,
        }
    }

    /// Number of floating-point elements on the wire.
    pub fn element_count(&self) -> usize {
        match self {
            Message::ModelBroadcast { x_c, a_c, .. } => model_elements(x_c, a_c.as_ref()),
            Message::SmashedUpload(u) => u.activations.len(),
            Message::GradDown(g) => g.d_smashed.len(),
            Message::ClientModelUpload(u) => model_elements(&u.x_c, u.a_c.as_ref()),
        }
    }

    /// Payload bytes: elements at `bytes_per_element`, plus one byte per
    /// label on smashed uploads. Headers are not modelled.
    pub fn byte_size(&self, bytes_per_element: usize) -> usize {
        let labels = match self {
            Message::SmashedUpload(u) => u.labels.len() * LABEL_BYTES,
            _ => 0,
        };
        self.element_count() * bytes_per_element + labels
    }

    /// Little-endian payload encoding whose length is exactly
    /// [`Message::byte_size`]. Supports 4-byte (f32) and 8-byte (f64)
    /// elements.
    pub fn encode(&self, bytes_per_element: usize) -> Result<Vec<u8>> {
        if bytes_per_element != 4 && bytes_per_element != 8 {
            return Err(Error::usage(format!(
                "cannot encode {bytes_per_element}-byte elements"
            )));
        }
        let mut values: Vec<f64> = Vec::with_capacity(self.element_count());
        let mut labels: &[usize] = &[];
        let mut push_params = |p: &ParamSet| {
            for (_, t) in p {
                values.extend_from_slice(t.data());
            }
        };
        match self {
            Message::ModelBroadcast { x_c, a_c, .. } => {
                push_params(x_c);
                a_c.iter().for_each(push_params);
            }
            Message::ClientModelUpload(u) => {
                push_params(&u.x_c);
                u.a_c.iter().for_each(push_params);
            }
            Message::GradDown(g) => values.extend_from_slice(g.d_smashed.data()),
            Message::SmashedUpload(u) => {
                values.extend_from_slice(u.activations.data());
                labels = &u.labels;
            }
        }
        let mut out = Vec::with_capacity(self.byte_size(bytes_per_element));
        for v in values {
            if bytes_per_element == 4 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &l in labels {
            let b = u8::try_from(l)
                .map_err(|_| Error::usage(format!("label {l} does not fit in one byte")))?;
            out.push(b);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("000.weight", Tensor::vector(vec![0.5; n]));
        p
    }

    #[test]
    fn broadcast_bytes() {
        let m = Message::ModelBroadcast {
            client: 0,
            x_c: params(100),
            a_c: Some(params(10)),
        };
        assert_eq!(m.byte_size(4), 440);
        // five participants at 4 B/element
        assert_eq!(5 * m.byte_size(4), 2200);
        assert_eq!(m.direction(), Direction::Downlink);
    }

    #[test]
    fn grad_down_bytes() {
        let g = Message::GradDown(GradDown {
            client: 1,
            batch_id: 0,
            d_smashed: Tensor::zeros(&[10, 10]),
        });
        assert_eq!(g.byte_size(4), 400);
    }

    #[test]
    fn encoded_length_matches_byte_size() {
        let msgs = vec![
            Message::SmashedUpload(SmashedUpload {
                client: 0,
                batch_id: 3,
                activations: Tensor::filled(&[4, 3], 1.5),
                labels: vec![0, 1, 2, 255],
            }),
            Message::ClientModelUpload(ClientModelUpload {
                client: 2,
                x_c: params(7),
                a_c: None,
            }),
        ];
        for m in &msgs {
            for bpe in [4, 8] {
                assert_eq!(m.encode(bpe).unwrap().len(), m.byte_size(bpe));
            }
        }
        assert_eq!(msgs[0].byte_size(4), 52);
        assert!(msgs[0].encode(2).is_err());
    }
}

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::model::{SplitModelSpec, SplitParams};
use crate::nn::{backward, clip_by_global_norm, forward, sgd_step, softmax_cross_entropy};
use crate::protocol::message::{ClientModelUpload, GradDown, Message, SmashedUpload};
use crate::protocol::strategy::Strategy;
use crate::tensor::ParamSet;

/// Outcome of one server-side ingest.
#[derive(Debug, Clone)]
pub struct Ingest {
    pub client: usize,
    pub grad_down: Option<GradDown>,
    pub loss: f64,
    /// Squared norm of the (unclipped) server stochastic gradient.
    pub grad_sq_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    strategy: Strategy,
    n_clients: usize,
    models: Vec<ParamSet>,
    queue: VecDeque<SmashedUpload>,
    x_c: ParamSet,
    a_c: Option<ParamSet>,
    round: usize,
    participants: BTreeSet<usize>,
}

impl ServerState {
    /// Replicates `params.server` into as many copies as the strategy keeps.
    pub fn new(strategy: Strategy, n_clients: usize, params: SplitParams) -> Result<Self> {
        strategy.validate()?;
        if n_clients == 0 {
            return Err(Error::usage("n_clients must be at least 1"));
        }
        if strategy.kind.uses_aux() != params.aux.is_some() {
            return Err(Error::config(
                "model.aux_head",
                format!("aux head presence does not match {}", strategy.kind),
            ));
        }
        let copies = strategy.kind.server_copies(n_clients);
        Ok(Self {
            strategy,
            n_clients,
            models: vec![params.server; copies],
            queue: VecDeque::new(),
            x_c: params.client,
            a_c: params.aux,
            round: 0,
            participants: BTreeSet::new(),
        })
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn server_models(&self) -> &[ParamSet] {
        &self.models
    }

    /// The server model that serves `client`.
    pub fn model_for(&self, client: usize) -> &ParamSet {
        &self.models[self.slot(client)]
    }

    pub fn global_client(&self) -> &ParamSet {
        &self.x_c
    }

    pub fn global_aux(&self) -> Option<&ParamSet> {
        self.a_c.as_ref()
    }

    pub fn participants(&self) -> &BTreeSet<usize> {
        &self.participants
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    fn slot(&self, client: usize) -> usize {
        if self.models.len() == 1 {
            0
        } else {
            client
        }
    }

    /// Starts a round: fixes the participant set and emits one broadcast per
    /// participant.
    pub fn broadcast_models(&mut self, participants: &[usize]) -> Result<Vec<Message>> {
        if participants.is_empty() {
            return Err(Error::usage("broadcast to an empty participant set"));
        }
        let set: BTreeSet<usize> = participants.iter().copied().collect();
        if set.len() != participants.len() {
            return Err(Error::usage("duplicate participant"));
        }
        if let Some(&bad) = set.iter().find(|&&c| c >= self.n_clients) {
            return Err(Error::usage(format!("participant {bad} out of range")));
        }
        self.participants = set;
        Ok(participants
            .iter()
            .map(|&client| Message::ModelBroadcast {
                client,
                x_c: self.x_c.clone(),
                a_c: self.a_c.clone(),
            })
            .collect())
    }

    fn check_participant(&self, client: usize) -> Result<()> {
        if self.participants.contains(&client) {
            Ok(())
        } else {
            Err(Error::protocol(format!(
                "client {client} is not a participant of round {}",
                self.round
            )))
        }
    }

    pub fn enqueue(&mut self, upload: SmashedUpload) -> Result<()> {
        self.check_participant(upload.client)?;
        self.queue.push_back(upload);
        Ok(())
    }

    /// One SGD step of the serving model on an upload's activations and
    /// labels. FSL_OC clips the gradient first; baselines get the
    /// smashed-data gradient back.
    pub fn server_ingest(
        &mut self,
        spec: &SplitModelSpec,
        upload: SmashedUpload,
        eta: f64,
    ) -> Result<Ingest> {
        self.check_participant(upload.client)?;
        let slot = self.slot(upload.client);
        let model = &self.models[slot];
        let (logits, trace) = forward(&spec.server_stack, model, &upload.activations)?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, &upload.labels)?;
        let (grads, d_smashed) = backward(&spec.server_stack, model, trace, &d_logits)?;
        let grad_sq_norm = grads.sq_norm();
        let grads = match self.strategy.effective_clip() {
            Some(c) => clip_by_global_norm(&grads, c),
            None => grads,
        };
        self.models[slot] = sgd_step(model, &grads, eta)?;
        let grad_down = self.strategy.kind.sends_grad_down().then_some(GradDown {
            client: upload.client,
            batch_id: upload.batch_id,
            d_smashed,
        });
        Ok(Ingest {
            client: upload.client,
            grad_down,
            loss,
            grad_sq_norm,
        })
    }

    /// Ingests every queued upload in FIFO order.
    pub fn drain(&mut self, spec: &SplitModelSpec, eta: f64) -> Result<Vec<Ingest>> {
        let mut out = Vec::with_capacity(self.queue.len());
        while let Some(u) = self.queue.pop_front() {
            out.push(self.server_ingest(spec, u, eta)?);
        }
        Ok(out)
    }

    /// Replaces the global client model (and aux head) with the unweighted
    /// mean of the participants' uploads and advances the round.
    pub fn aggregate(&mut self, uploads: &[ClientModelUpload]) -> Result<()> {
        if !self.queue.is_empty() {
            return Err(Error::protocol(format!(
                "{} smashed uploads still queued at aggregation",
                self.queue.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for u in uploads {
            self.check_participant(u.client)?;
            if !seen.insert(u.client) {
                return Err(Error::protocol(format!("duplicate upload from client {}", u.client)));
            }
        }
        if seen != self.participants {
            let missing: Vec<_> = self.participants.difference(&seen).collect();
            return Err(Error::protocol(format!("missing uploads from {missing:?}")));
        }
        let x_c = mean_params(uploads.iter().map(|u| &u.x_c))?;
        let a_c = if self.a_c.is_some() {
            let heads: Option<Vec<&ParamSet>> = uploads.iter().map(|u| u.a_c.as_ref()).collect();
            let heads = heads.ok_or_else(|| Error::protocol("upload without aux head"))?;
            Some(mean_params(heads.into_iter())?)
        } else {
            None
        };
        self.x_c = x_c;
        self.a_c = a_c;
        self.round += 1;
        Ok(())
    }
}

/// Elementwise running mean. Exact when all inputs agree.
pub fn mean_params<'a>(mut sets: impl Iterator<Item = &'a ParamSet>) -> Result<ParamSet> {
    let first = sets
        .next()
        .ok_or_else(|| Error::usage("mean of zero parameter sets"))?;
    let mut mean = first.clone();
    for (k, next) in sets.enumerate() {
        if !mean.is_compatible(next) {
            return Err(Error::protocol("uploaded models have different shapes"));
        }
        let inv = 1.0 / (k + 2) as f64;
        for ((_, m), (_, x)) in mean.iter_mut().zip(next.iter()) {
            for (mv, &xv) in m.data_mut().iter_mut().zip(x.data()) {
                *mv += (xv - *mv) * inv;
            }
        }
    }
    Ok(mean)
}

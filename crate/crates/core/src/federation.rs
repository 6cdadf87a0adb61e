//! The federated fine-tuning protocol: client-local adapter training, update
//! transmission, server aggregation, and participation schedules.
//!
//! Malicious and alignment clients differ from benign ones only in the data
//! they hold; every client runs the same [`local_train`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggOutput, AggregationError, Aggregator, UpdateEntry, UpdateSet};
use crate::data::RenderedExample;
use crate::model::{adapter_loss_and_grad, sequence_loss, LossMask, ModelError, TransformerWeights};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::peft::{AdapterParams, FlatUpdate, PeftError};
use crate::rng;

const LOCAL_STREAM: u64 = 0x6c6f_6361_6c;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("round {0}: no participating clients")]
    NoParticipants(usize),
    #[error("round {round} is outside the schedule of {total} rounds")]
    RoundOutOfRange { round: usize, total: usize },
    #[error("client {0} has an empty dataset")]
    EmptyDataset(usize),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: ModelError,
    },
    #[error("round {round}: aggregation failed: {source}")]
    Aggregation {
        round: usize,
        #[source]
        source: AggregationError,
    },
    #[error("loss evaluation failed: {0}")]
    Loss(#[source] ModelError),
    #[error(transparent)]
    Peft(#[from] PeftError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Benign,
    Malicious,
    Alignment,
}

/// Half-open round interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, round: usize) -> bool {
        (self.start..self.end).contains(&round)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub dataset: Vec<RenderedExample>,
    pub optimizer: OptimizerSpec,
}

impl ClientState {
    /// m_k.
    pub fn example_count(&self) -> usize {
        self.dataset.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundSchedule {
    pub total_rounds: usize,
    pub benign: Window,
    pub malicious: Window,
    pub alignment: Window,
}

impl RoundSchedule {
    /// Every role active in every round.
    pub fn full(total_rounds: usize) -> Self {
        let all = Window::new(0, total_rounds);
        Self {
            total_rounds,
            benign: all,
            malicious: all,
            alignment: all,
        }
    }

    pub fn window(&self, role: Role) -> Window {
        match role {
            Role::Benign => self.benign,
            Role::Malicious => self.malicious,
            Role::Alignment => self.alignment,
        }
    }
}

/// Ids of the clients whose role window contains round `t`.
pub fn select_clients(schedule: &RoundSchedule, clients: &[ClientState], t: usize) -> Result<Vec<usize>, FederationError> {
    if t >= schedule.total_rounds {
        return Err(FederationError::RoundOutOfRange {
            round: t,
            total: schedule.total_rounds,
        });
    }
    let ids: Vec<usize> = clients
        .iter()
        .filter(|c| schedule.window(c.role).contains(t))
        .map(|c| c.id)
        .collect();
    if ids.is_empty() {
        return Err(FederationError::NoParticipants(t));
    }
    Ok(ids)
}

/// Inputs shared by every client in one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundContext {
    pub master_seed: u64,
    pub round: usize,
    pub mask: LossMask,
}

/// Runs `S` optimizer steps from `theta` on the client's data and returns
/// `flatten(θ_final) − flatten(θ_t)`. Mini-batches come from a per-client,
/// per-round shuffled pass over the dataset; optimizer state starts fresh.
pub fn local_train(
    w: &TransformerWeights,
    theta: &AdapterParams,
    client: &ClientState,
    ctx: &RoundContext,
) -> Result<FlatUpdate, FederationError> {
    if client.dataset.is_empty() {
        return Err(FederationError::EmptyDataset(client.id));
    }
    let spec = &client.optimizer;
    let mut rng = rng::stream(&[ctx.master_seed, LOCAL_STREAM, client.id as u64, ctx.round as u64]);
    let mut order: Vec<usize> = (0..client.dataset.len()).collect();
    let mut cursor = order.len();
    let mut local = theta.clone();
    let start = theta.flatten();
    let mut params = start.0.clone();
    let mut opt = Optimizer::new(spec, params.len());
    let mut batch = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.local_steps {
        batch.clear();
        while batch.len() < spec.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&client.dataset[order[cursor]]);
            cursor += 1;
        }
        let (_, grad) = adapter_loss_and_grad(w, &local, &batch, ctx.mask).map_err(|source| FederationError::Client {
            client: client.id,
            source,
        })?;
        opt.step(&mut params, &grad);
        local.assign_flat(&params)?;
    }
    Ok(FlatUpdate(params).sub(&start)?)
}

pub struct ServerState {
    pub theta: AdapterParams,
    pub round: usize,
    pub aggregator: Aggregator,
    pub schedule: RoundSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub participants: Vec<usize>,
    pub aggregate: AggOutput,
}

/// One round with [`local_train`] as the client routine.
pub fn run_round(
    server: &mut ServerState,
    w: &TransformerWeights,
    clients: &[ClientState],
    master_seed: u64,
    mask: LossMask,
) -> Result<RoundSummary, FederationError> {
    run_round_with(server, w, clients, master_seed, mask, local_train)
}

/// Broadcast θ_t, collect `(m_k, Δθ_k)` from the active clients via
/// `trainer`, aggregate, and advance to θ_{t+1} = θ_t + u.
pub fn run_round_with<T>(
    server: &mut ServerState,
    w: &TransformerWeights,
    clients: &[ClientState],
    master_seed: u64,
    mask: LossMask,
    trainer: T,
) -> Result<RoundSummary, FederationError>
where
    T: Fn(&TransformerWeights, &AdapterParams, &ClientState, &RoundContext) -> Result<FlatUpdate, FederationError> + Sync,
{
    let t = server.round;
    let participants = select_clients(&server.schedule, clients, t)?;
    let ctx = RoundContext {
        master_seed,
        round: t,
        mask,
    };
    let theta = &server.theta;
    let entries = participants
        .par_iter()
        .map(|&id| {
            let client = clients.iter().find(|c| c.id == id).expect("selected client exists");
            Ok(UpdateEntry {
                client_id: id,
                weight: client.example_count() as u64,
                update: trainer(w, theta, client, &ctx)?,
            })
        })
        .collect::<Result<Vec<_>, FederationError>>()?;
    let set = UpdateSet::new(entries).map_err(|source| FederationError::Aggregation { round: t, source })?;
    let aggregate = server
        .aggregator
        .aggregate(&set, t)
        .map_err(|source| FederationError::Aggregation { round: t, source })?;
    let next = server.theta.flatten().add(&aggregate.update)?;
    server.theta.assign_flat(&next.0)?;
    server.round += 1;
    Ok(RoundSummary {
        round: t,
        participants,
        aggregate,
    })
}

/// Unweighted mean over clients of each client's mean sequence loss.
pub fn global_objective(
    w: &TransformerWeights,
    theta: &AdapterParams,
    clients: &[ClientState],
    mask: LossMask,
) -> Result<f64, FederationError> {
    if clients.is_empty() {
        return Err(FederationError::NoParticipants(0));
    }
    let per_client = clients
        .iter()
        .map(|c| {
            if c.dataset.is_empty() {
                return Err(FederationError::EmptyDataset(c.id));
            }
            let losses = c
                .dataset
                .par_iter()
                .map(|seq| sequence_loss(w, Some(theta), seq, mask))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(FederationError::Loss)?;
            Ok(losses.iter().sum::<f64>() / losses.len() as f64)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(per_client.iter().sum::<f64>() / per_client.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(id: usize, role: Role) -> ClientState {
        ClientState {
            id,
            role,
            dataset: Vec::new(),
            optimizer: OptimizerSpec::default(),
        }
    }

    #[test]
    fn windows_are_half_open() {
        let w = Window::new(0, 5);
        assert!(w.contains(0) && w.contains(4) && !w.contains(5));
    }

    #[test]
    fn ppsa_selection() {
        let schedule = RoundSchedule {
            total_rounds: 14,
            benign: Window::new(0, 10),
            malicious: Window::new(0, 5),
            alignment: Window::new(10, 14),
        };
        let mut clients: Vec<_> = (0..9).map(|i| client(i, Role::Benign)).collect();
        clients.extend((9..12).map(|i| client(i, Role::Malicious)));
        clients.extend((12..15).map(|i| client(i, Role::Alignment)));
        assert_eq!(select_clients(&schedule, &clients, 3).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(select_clients(&schedule, &clients, 12).unwrap(), vec![12, 13, 14]);
        assert_eq!(select_clients(&schedule, &clients, 7).unwrap(), (0..9).collect::<Vec<_>>());
        assert!(matches!(
            select_clients(&schedule, &clients, 14),
            Err(FederationError::RoundOutOfRange { .. })
        ));
        let only_align = vec![client(0, Role::Alignment)];
        assert!(matches!(
            select_clients(&schedule, &only_align, 2),
            Err(FederationError::NoParticipants(2))
        ));
    }

    #[test]
    fn full_schedule_selects_everyone() {
        let clients: Vec<_> = (0..15).map(|i| client(i, Role::Benign)).collect();
        for t in [0, 12, 24] {
            assert_eq!(select_clients(&RoundSchedule::full(25), &clients, t).unwrap().len(), 15);
        }
    }
}

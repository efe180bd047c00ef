//! Cooperative HVAC scheduling with peer-to-peer energy trading.
//!
//! Each household minimizes its own grid bill and thermal discomfort; a
//! coordinator drives the households' pairwise trade proposals to a consistent,
//! antisymmetric set of trades without seeing any household's private
//! parameters.
//!
//! The numerical core is generic over [`num::Scalar`] (`f64` and `f32`); the
//! aliases below name the common instantiations.

pub mod agent;
pub mod coordinator;
pub mod linalg;
pub mod model;
pub mod num;
pub mod protocol;
pub mod qp;
pub mod scenario;

pub use agent::{solve_emp, AgentError, AgentOutcome, LocalAgent};
pub use coordinator::{run, AdmmConfig, Coordinator, CoordinatorError, DecayScope, ErrorNorm, RunOutcome, StepSize};
pub use model::{Schedule, Tariff, TimeGrid, TradeMatrix, UserParams};
pub use num::Scalar;
pub use qp::{check_kkt, solve, QpProblem, QpSolution, QpStatus};

pub type UserParamsF64 = UserParams<f64>;
pub type UserParamsF32 = UserParams<f32>;
pub type TariffF64 = Tariff<f64>;
pub type TariffF32 = Tariff<f32>;
pub type TimeGridF64 = TimeGrid<f64>;
pub type TimeGridF32 = TimeGrid<f32>;
pub type ScheduleF64 = Schedule<f64>;
pub type ScheduleF32 = Schedule<f32>;
pub type TradeMatrixF64 = TradeMatrix<f64>;
pub type QpProblemF64 = QpProblem<f64>;
pub type QpProblemF32 = QpProblem<f32>;
pub type QpSolutionF64 = QpSolution<f64>;
pub type QpSolutionF32 = QpSolution<f32>;
pub type LocalAgentF64 = LocalAgent<f64>;
pub type LocalAgentF32 = LocalAgent<f32>;
pub type AdmmConfigF64 = AdmmConfig<f64>;
pub type RunOutcomeF64 = RunOutcome<f64>;

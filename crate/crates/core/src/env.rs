//! A price panel cut into trading periods, with the per-period views the
//! trainer and the backtester both need.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::blmodel::{self, BlError};
use crate::exchange::CostSchedule;
use crate::marketdata::{daily_log_returns, AgentState, DataError, PeriodGrid, PricePanel, ReturnPanel};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("need at least {needed} complete periods, have {available}")]
    TooShort { needed: usize, available: usize },
    #[error("cost schedule prorates over {costs} days but periods are {grid} days")]
    PeriodMismatch { costs: usize, grid: usize },
}

#[derive(Debug, Clone)]
pub struct MarketEnv {
    prices: PricePanel,
    returns: ReturnPanel,
    grid: PeriodGrid,
    costs: CostSchedule,
    histories: Vec<Arc<DMatrix<f64>>>,
}

impl MarketEnv {
    /// Periods of `costs.period_days` days anchored at the first price day;
    /// decisions start once `window` periods of history exist.
    pub fn new(prices: PricePanel, window: usize, costs: CostSchedule) -> Result<Self, EnvError> {
        let returns = daily_log_returns(&prices);
        let grid = PeriodGrid::new(window, costs.period_days, returns.n_rows())?;
        if grid.n_periods() < window + 1 {
            return Err(EnvError::TooShort {
                needed: window + 1,
                available: grid.n_periods(),
            });
        }
        let k = grid.days_per_period();
        let len = grid.history_len();
        let histories = (window..=grid.n_periods())
            .map(|t| Arc::new(returns.matrix().rows((t - window) * k, len).into_owned()))
            .collect();
        Ok(Self {
            prices,
            returns,
            grid,
            costs,
            histories,
        })
    }

    /// Environment whose first decision executes at the close of the day
    /// before `first_day`, so the decision periods tile `first_day..` and the
    /// state history comes from the days before it.
    pub fn out_of_sample(
        prices: &PricePanel,
        first_day: usize,
        n_days: usize,
        window: usize,
        costs: CostSchedule,
    ) -> Result<Self, EnvError> {
        let lead = window * costs.period_days + 1;
        if first_day < lead {
            return Err(EnvError::Data(DataError::InsufficientHistory {
                needed: lead,
                available: first_day,
            }));
        }
        let end = (first_day + n_days).min(prices.n_days());
        Self::new(prices.slice_days(first_day - lead..end), window, costs)
    }

    pub fn panel(&self) -> &PricePanel {
        &self.prices
    }

    pub fn returns(&self) -> &ReturnPanel {
        &self.returns
    }

    pub fn grid(&self) -> &PeriodGrid {
        &self.grid
    }

    pub fn costs(&self) -> &CostSchedule {
        &self.costs
    }

    pub fn tickers(&self) -> &[String] {
        self.prices.tickers()
    }

    pub fn n_assets(&self) -> usize {
        self.prices.n_assets()
    }

    pub fn decision_periods(&self) -> std::ops::Range<usize> {
        self.grid.decision_periods()
    }

    /// Return rows of the `m` periods before `period`; valid up to and
    /// including the final period index.
    pub fn history(&self, period: usize) -> &Arc<DMatrix<f64>> {
        &self.histories[period - self.grid.window()]
    }

    pub fn state(&self, period: usize, prev_weights: &[f64]) -> AgentState {
        AgentState {
            prev_weights: prev_weights.to_vec(),
            history: Arc::clone(self.history(period)),
        }
    }

    pub fn exec_prices(&self, period: usize) -> Vec<f64> {
        self.prices.price_row(self.grid.exec_price_day(period))
    }

    pub fn period_prices(&self, period: usize) -> DMatrix<f64> {
        let days = self.grid.price_days(period);
        self.prices.prices().rows(days.start, days.len()).into_owned()
    }

    /// Mean daily return over the days of `period`.
    pub fn realized_mean(&self, period: usize) -> DVector<f64> {
        let rows = self.grid.return_rows(period);
        self.returns
            .matrix()
            .rows(rows.start, rows.len())
            .row_mean()
            .transpose()
    }

    /// Covariance over the window that ends with `period` itself.
    pub fn realized_cov(&self, period: usize) -> Result<DMatrix<f64>, BlError> {
        Ok(blmodel::historical_cov(self.history(period + 1))?.cov)
    }
}

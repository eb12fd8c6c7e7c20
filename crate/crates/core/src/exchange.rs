//! Self-financing execution: integer-share orders, commissions, borrow fees,
//! cash interest and daily marking of the total asset value.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExchangeError {
    #[error("portfolio bankrupt on day {day} of the period (value {value})")]
    Bankrupt {
        day: usize,
        value: f64,
        /// Marks up to and including the failing day.
        daily_values: Vec<f64>,
        start_value: f64,
    },
    #[error("loss of {loss} exceeds the investment amount on day {day}")]
    LossExceedsInvestment { day: usize, loss: f64 },
    #[error("rate {name} must be non-negative and finite, got {value}")]
    BadRate { name: &'static str, value: f64 },
    #[error("expected {expected} assets, got {got}")]
    Width { expected: usize, got: usize },
    #[error("non-positive price {0}")]
    BadPrice(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSchedule {
    pub commission_rate: f64,
    pub cash_lending_rate_annual: f64,
    pub stock_lending_rate_annual: f64,
    pub period_days: usize,
    pub days_per_year: f64,
}

impl CostSchedule {
    pub fn new(
        commission_rate: f64,
        cash_lending_rate_annual: f64,
        stock_lending_rate_annual: f64,
        period_days: usize,
    ) -> Result<Self, ExchangeError> {
        let c = Self {
            commission_rate,
            cash_lending_rate_annual,
            stock_lending_rate_annual,
            period_days,
            days_per_year: 252.0,
        };
        c.validate()?;
        Ok(c)
    }

    /// 0.05% commission, 3% annual on borrowed cash and borrowed stock.
    pub fn standard(period_days: usize) -> Self {
        Self::new(0.0005, 0.03, 0.03, period_days).expect("valid defaults")
    }

    pub fn free(period_days: usize) -> Self {
        Self::new(0.0, 0.0, 0.0, period_days).expect("valid")
    }

    pub fn validate(&self) -> Result<(), ExchangeError> {
        for (name, value) in [
            ("commission_rate", self.commission_rate),
            ("cash_lending_rate_annual", self.cash_lending_rate_annual),
            ("stock_lending_rate_annual", self.stock_lending_rate_annual),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ExchangeError::BadRate { name, value });
            }
        }
        if !(self.days_per_year > 0.0) {
            return Err(ExchangeError::BadRate {
                name: "days_per_year",
                value: self.days_per_year,
            });
        }
        Ok(())
    }

    pub fn cash_rate_per_period(&self) -> f64 {
        self.cash_lending_rate_annual * self.period_days as f64 / self.days_per_year
    }

    pub fn stock_rate_per_period(&self) -> f64 {
        self.stock_lending_rate_annual * self.period_days as f64 / self.days_per_year
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub cash: f64,
    pub holdings: Vec<i64>,
    pub total_value: f64,
    pub invest_amount: f64,
    pub initial_amount: f64,
}

impl Ledger {
    /// All cash; the amount put to work each period is half the initial
    /// capital.
    pub fn new(initial_amount: f64, n_assets: usize) -> Self {
        Self {
            cash: initial_amount,
            holdings: vec![0; n_assets],
            total_value: initial_amount,
            invest_amount: 0.5 * initial_amount,
            initial_amount,
        }
    }

    pub fn mark(&self, prices: &[f64]) -> f64 {
        self.cash + dot_q(&self.holdings, prices)
    }
}

fn dot_q(q: &[i64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(&q, &p)| q as f64 * p).sum()
}

/// One executed order line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fill {
    pub asset: usize,
    pub delta_shares: i64,
    pub exec_price: f64,
    pub commission: f64,
    pub borrow_fee: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodOutcome {
    /// Period log2 return relative to the investment amount.
    pub xi: f64,
    /// Training-time daily returns; they sum to `xi`.
    pub daily_returns: Vec<f64>,
    /// v at each daily close of the period.
    pub daily_values: Vec<f64>,
    /// v at the execution close, before trading.
    pub start_value: f64,
    pub txn_scale_ratio: f64,
    pub traded_value: f64,
    pub commission: f64,
    pub borrow_fee: f64,
    /// Interest charged on negative cash (non-negative number).
    pub cash_interest: f64,
    pub fills: Vec<Fill>,
    pub ledger: Ledger,
}

/// Whole shares for weights of the investment amount, floored toward −∞.
pub fn target_quantity(weights: &[f64], invest_amount: f64, prices: &[f64]) -> Vec<i64> {
    weights
        .iter()
        .zip(prices)
        .map(|(&w, &p)| {
            let q = (invest_amount * w / p).floor();
            q.clamp(i64::MIN as f64, i64::MAX as f64) as i64
        })
        .collect()
}

/// Rebalances to `target_q` at `exec_prices`, then marks the book at each
/// row of `daily_prices` (the last row is the period close).
pub fn step_period(
    ledger: &mut Ledger,
    target_q: &[i64],
    exec_prices: &[f64],
    daily_prices: &DMatrix<f64>,
    costs: &CostSchedule,
) -> Result<PeriodOutcome, ExchangeError> {
    let n = ledger.holdings.len();
    for got in [target_q.len(), exec_prices.len(), daily_prices.ncols()] {
        if got != n {
            return Err(ExchangeError::Width { expected: n, got });
        }
    }
    if let Some(&p) = exec_prices.iter().find(|p| !(**p > 0.0)) {
        return Err(ExchangeError::BadPrice(p));
    }

    let t_amt = ledger.invest_amount;
    let start_value = ledger.mark(exec_prices);
    let r_s = costs.stock_rate_per_period();
    let r_l = costs.cash_rate_per_period();

    let mut fills = Vec::new();
    let (mut trade, mut traded_value, mut commission, mut borrow_fee) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let prev = ledger.holdings[i];
        let dq = target_q[i] - prev;
        let p = exec_prices[i];
        let fee_i = r_s * (prev.min(0) as f64).abs() * p;
        let comm_i = costs.commission_rate * (dq as f64).abs() * p;
        trade += dq as f64 * p;
        traded_value += (dq as f64).abs() * p;
        commission += comm_i;
        borrow_fee += fee_i;
        if dq != 0 || fee_i != 0.0 {
            fills.push(Fill {
                asset: i,
                delta_shares: dq,
                exec_price: p,
                commission: comm_i,
                borrow_fee: fee_i,
            });
        }
    }
    let cash_interest = if ledger.cash < 0.0 {
        -ledger.cash * r_l
    } else {
        0.0
    };
    ledger.cash = ledger.cash - cash_interest - trade - borrow_fee - commission;
    ledger.holdings.copy_from_slice(target_q);

    let k = daily_prices.nrows();
    let mut daily_values = Vec::with_capacity(k);
    for day in 0..k {
        let row: Vec<f64> = daily_prices.row(day).iter().copied().collect();
        let v = ledger.mark(&row);
        daily_values.push(v);
        ledger.total_value = v;
        if !(v > 0.0) {
            return Err(ExchangeError::Bankrupt {
                day,
                value: v,
                daily_values,
                start_value,
            });
        }
    }

    let mut daily_returns = Vec::with_capacity(k);
    let mut prev_gain = t_amt;
    for (day, &v) in daily_values.iter().enumerate() {
        let gain = v - start_value + t_amt;
        if !(gain > 0.0) {
            return Err(ExchangeError::LossExceedsInvestment {
                day,
                loss: start_value - v,
            });
        }
        daily_returns.push((gain / prev_gain).log2());
        prev_gain = gain;
    }
    let xi = ((daily_values[k - 1] - start_value) / t_amt + 1.0).log2();

    Ok(PeriodOutcome {
        xi,
        daily_returns,
        daily_values,
        start_value,
        txn_scale_ratio: traded_value / t_amt,
        traded_value,
        commission,
        borrow_fee,
        cash_interest,
        fills,
        ledger: ledger.clone(),
    })
}

/// wᵀΣw.
pub fn portfolio_variance(weights: &[f64], cov: &DMatrix<f64>) -> f64 {
    let w = nalgebra::DVector::from_column_slice(weights);
    w.dot(&(cov * &w))
}

/// Order log rows `period,ticker,delta_shares,exec_price,commission,borrow_fee`.
pub fn write_order_log<'a, W: Write>(
    out: W,
    tickers: &[String],
    periods: impl IntoIterator<Item = (usize, &'a [Fill])>,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "period",
        "ticker",
        "delta_shares",
        "exec_price",
        "commission",
        "borrow_fee",
    ])?;
    for (period, fills) in periods {
        for f in fills {
            w.write_record([
                period.to_string(),
                tickers[f.asset].clone(),
                f.delta_shares.to_string(),
                f.exec_price.to_string(),
                f.commission.to_string(),
                f.borrow_fee.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(k: usize, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(k, p.len(), |_, i| p[i])
    }

    #[test]
    fn quantity_floors_toward_negative_infinity() {
        assert_eq!(target_quantity(&[0.5], 1000.0, &[3.0]), vec![166]);
        assert_eq!(target_quantity(&[0.0, 0.0], 1000.0, &[3.0, 4.0]), vec![0, 0]);
        // -300/7 = -42.857..., exact rational floor is -43
        assert_eq!(target_quantity(&[-0.3], 1000.0, &[7.0]), vec![-43]);
    }

    #[test]
    fn no_trade_period_keeps_cash() {
        let mut l = Ledger::new(1000.0, 2);
        l.holdings = vec![2, 1];
        l.cash = 500.0;
        let out = step_period(&mut l, &[2, 1], &[10.0, 20.0], &flat(5, &[10.0, 20.0]), &CostSchedule::standard(5)).unwrap();
        assert_eq!(l.cash, 500.0);
        assert_eq!(out.txn_scale_ratio, 0.0);
        assert_eq!(out.xi, 0.0);
        assert!(out.fills.is_empty());
    }

    #[test]
    fn costs_only_loss_on_flat_prices() {
        let mut l = Ledger::new(1000.0, 2);
        let out = step_period(&mut l, &[10, -4], &[10.0, 20.0], &flat(5, &[10.0, 20.0]), &CostSchedule::standard(5)).unwrap();
        let fees = 0.0005 * (100.0 + 80.0);
        assert!((out.xi - (1.0f64 - fees / 500.0).log2()).abs() < 1e-15);
        assert!(out.xi < 0.0);
    }

    #[test]
    fn scripted_two_asset_ledger() {
        let costs = CostSchedule::new(0.0005, 0.03, 0.03, 5).unwrap();
        let r_s = 0.03 * 5.0 / 252.0;
        let mut l = Ledger::new(10_000.0, 2);
        let p = [100.0, 50.0];
        step_period(&mut l, &[10, -5], &p, &flat(5, &p), &costs).unwrap();
        // spreadsheet: buy 1000, short-sale proceeds 250, commission 0.5 + 0.125
        let cash1 = 10_000.0 - 1000.0 + 250.0 - 0.625;
        assert!((l.cash - cash1).abs() <= 1e-9 * cash1);
        assert!((l.total_value - (cash1 + 1000.0 - 250.0)).abs() <= 1e-9 * 1e4);

        // hold: only the borrow fee on the 5 shorted shares
        let out = step_period(&mut l, &[10, -5], &p, &flat(5, &p), &costs).unwrap();
        let cash2 = cash1 - r_s * 5.0 * 50.0;
        assert!((l.cash - cash2).abs() <= 1e-9 * cash2);
        assert!((out.borrow_fee - r_s * 250.0).abs() < 1e-12);
        assert_eq!(out.fills.len(), 1);
    }

    #[test]
    fn negative_cash_pays_interest() {
        let costs = CostSchedule::new(0.0, 0.03, 0.0, 5).unwrap();
        let mut l = Ledger::new(1000.0, 2);
        l.cash = -200.0;
        l.holdings = vec![100, 0];
        let p = [12.0, 1.0];
        let out = step_period(&mut l, &[100, 0], &p, &flat(5, &p), &costs).unwrap();
        let charge = 200.0 * 0.03 * 5.0 / 252.0;
        assert!((out.cash_interest - charge).abs() < 1e-12);
        assert!((l.cash - (-200.0 - charge)).abs() < 1e-12);
    }

    #[test]
    fn daily_returns_telescope() {
        let mut l = Ledger::new(1e6, 2);
        let daily = DMatrix::from_row_slice(5, 2, &[10.1, 19.0, 10.4, 19.5, 9.9, 21.0, 10.2, 20.0, 10.6, 19.7]);
        let out = step_period(&mut l, &[30_000, -10_000], &[10.0, 20.0], &daily, &CostSchedule::standard(5)).unwrap();
        let s: f64 = out.daily_returns.iter().sum();
        assert!((s - out.xi).abs() < 1e-12);
    }

    #[test]
    fn bankruptcy_halts() {
        let mut l = Ledger::new(1000.0, 2);
        let daily = DMatrix::from_row_slice(2, 2, &[10.0, 1.0, 1000.0, 1.0]);
        let err = step_period(&mut l, &[-50, 0], &[10.0, 1.0], &daily, &CostSchedule::free(2)).unwrap_err();
        match err {
            ExchangeError::Bankrupt { day, daily_values, .. } => {
                assert_eq!(day, 1);
                assert_eq!(daily_values.len(), 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn variance_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_eq!(portfolio_variance(&[1.0, 0.0, 0.0], &i), 1.0);
        assert_eq!(portfolio_variance(&[0.0; 3], &i), 0.0);
        let s = DMatrix::from_row_slice(4, 4, &[
            2.0, 0.3, -0.1, 0.0, 0.3, 1.5, 0.2, 0.1, -0.1, 0.2, 1.0, 0.4, 0.0, 0.1, 0.4, 3.0,
        ]);
        let w = [0.3, -0.7, 1.2, 0.05];
        let mut oracle = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                oracle += w[a] * s[(a, b)] * w[b];
            }
        }
        assert!((portfolio_variance(&w, &s) - oracle).abs() < 1e-14);
    }

    #[test]
    fn rejects_negative_rates() {
        assert!(CostSchedule::new(-0.1, 0.0, 0.0, 5).is_err());
        assert!((CostSchedule::standard(5).stock_rate_per_period() - 0.15 / 252.0).abs() < 1e-18);
    }

    #[test]
    fn order_log_layout() {
        let mut l = Ledger::new(1000.0, 2);
        let p = [10.0, 20.0];
        let out = step_period(&mut l, &[3, -1], &p, &flat(1, &p), &CostSchedule::standard(1)).unwrap();
        let mut buf = Vec::new();
        write_order_log(&mut buf, &["A".into(), "B".into()], [(7, out.fills.as_slice())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "period,ticker,delta_shares,exec_price,commission,borrow_fee");
        assert_eq!(lines[1], "7,A,3,10,0.015,0");
        assert_eq!(lines[2], "7,B,-1,20,0.01,0");
    }
}

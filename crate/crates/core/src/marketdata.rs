//! Price ingestion, daily log2 returns, the trading-period grid and agent
//! states.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed price csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad date {0:?}, expected YYYY-MM-DD")]
    BadDate(String),
    #[error("ticker {0} has no rows")]
    MissingTicker(String),
    #[error("non-positive or non-finite price {price} for {ticker} on {date}")]
    NonPositivePrice {
        ticker: String,
        date: NaiveDate,
        price: f64,
    },
    #[error("duplicate row for {ticker} on {date}")]
    DuplicateRow { ticker: String, date: NaiveDate },
    #[error("need at least {needed} aligned days, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("panel needs at least two assets, got {0}")]
    TooFewAssets(usize),
    #[error("dates must be strictly increasing")]
    UnsortedDates,
    #[error("price matrix is {rows}x{cols}, expected {dates}x{tickers}")]
    Shape {
        rows: usize,
        cols: usize,
        dates: usize,
        tickers: usize,
    },
    #[error("days per period and window length must be positive")]
    EmptyGrid,
}

/// Aligned adjusted closes: one row per trading day, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    tickers: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
}

impl PricePanel {
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        prices: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        if tickers.len() < 2 {
            return Err(DataError::TooFewAssets(tickers.len()));
        }
        Self::new_unchecked_width(tickers, dates, prices)
    }

    /// Like [`PricePanel::new`] but accepts a single asset. Used by analytic
    /// one-asset experiments.
    pub fn single_or_more(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        prices: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        if tickers.is_empty() {
            return Err(DataError::TooFewAssets(0));
        }
        Self::new_unchecked_width(tickers, dates, prices)
    }

    fn new_unchecked_width(
        tickers: Vec<String>,
        dates: Vec<NaiveDate>,
        prices: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        if prices.nrows() != dates.len() || prices.ncols() != tickers.len() {
            return Err(DataError::Shape {
                rows: prices.nrows(),
                cols: prices.ncols(),
                dates: dates.len(),
                tickers: tickers.len(),
            });
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::UnsortedDates);
        }
        for (d, date) in dates.iter().enumerate() {
            for (i, ticker) in tickers.iter().enumerate() {
                let p = prices[(d, i)];
                if !(p > 0.0 && p.is_finite()) {
                    return Err(DataError::NonPositivePrice {
                        ticker: ticker.clone(),
                        date: *date,
                        price: p,
                    });
                }
            }
        }
        Ok(Self {
            tickers,
            dates,
            prices,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn price_row(&self, day: usize) -> Vec<f64> {
        self.prices.row(day).iter().copied().collect()
    }

    /// Days in `[start, end]`, both inclusive.
    pub fn between(&self, start: NaiveDate, end: NaiveDate) -> PricePanel {
        let lo = self.dates.partition_point(|d| *d < start);
        let hi = self.dates.partition_point(|d| *d <= end);
        self.slice_days(lo..hi.max(lo))
    }

    pub fn slice_days(&self, days: Range<usize>) -> PricePanel {
        PricePanel {
            tickers: self.tickers.clone(),
            dates: self.dates[days.clone()].to_vec(),
            prices: self.prices.rows(days.start, days.len()).into_owned(),
        }
    }

    /// Index of the first date on or after `date`.
    pub fn position_of(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d < date)
    }

    /// Writes the panel back out in the long `date,ticker,adj_close` layout,
    /// dates ascending and tickers in panel order. Prices are printed in
    /// shortest round-trip form so reloading is exact.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "ticker", "adj_close"])?;
        for (d, date) in self.dates.iter().enumerate() {
            let ds = date.format("%Y-%m-%d").to_string();
            for (i, t) in self.tickers.iter().enumerate() {
                w.write_record([ds.as_str(), t.as_str(), &self.prices[(d, i)].to_string()])?;
            }
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    date: String,
    ticker: String,
    adj_close: f64,
}

fn parse_date(s: &str) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| DataError::BadDate(s.into()))
}

/// Loads a long-format price file, keeps `tickers` and drops any date on
/// which one of them is missing. Fails if fewer than `min_days` remain.
pub fn load_price_panel(
    path: impl AsRef<Path>,
    tickers: &[String],
    min_days: usize,
) -> Result<PricePanel, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_price_panel(file, tickers, min_days)
}

pub fn read_price_panel<R: Read>(
    input: R,
    tickers: &[String],
    min_days: usize,
) -> Result<PricePanel, DataError> {
    let column: HashMap<&str, usize> = tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut cells: BTreeMap<NaiveDate, Vec<Option<f64>>> = BTreeMap::new();
    let mut seen = vec![false; tickers.len()];

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    for row in reader.deserialize() {
        let row: PriceRow = row?;
        let Some(&i) = column.get(row.ticker.as_str()) else {
            continue;
        };
        let date = parse_date(&row.date)?;
        if !(row.adj_close > 0.0 && row.adj_close.is_finite()) {
            return Err(DataError::NonPositivePrice {
                ticker: row.ticker,
                date,
                price: row.adj_close,
            });
        }
        let slot = &mut cells.entry(date).or_insert_with(|| vec![None; tickers.len()])[i];
        if slot.is_some() {
            return Err(DataError::DuplicateRow {
                ticker: row.ticker,
                date,
            });
        }
        *slot = Some(row.adj_close);
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DataError::MissingTicker(tickers[i].clone()));
    }

    let complete: Vec<(NaiveDate, Vec<f64>)> = cells
        .into_iter()
        .filter_map(|(d, row)| row.into_iter().collect::<Option<Vec<_>>>().map(|r| (d, r)))
        .collect();
    if complete.len() < min_days {
        return Err(DataError::InsufficientHistory {
            needed: min_days,
            available: complete.len(),
        });
    }
    let n = tickers.len();
    let prices = DMatrix::from_fn(complete.len(), n, |d, i| complete[d].1[i]);
    let dates = complete.into_iter().map(|(d, _)| d).collect();
    PricePanel::single_or_more(tickers.to_vec(), dates, prices)
}

/// Daily base-2 log returns, one row fewer than the price panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    returns: DMatrix<f64>,
}

impl ReturnPanel {
    pub fn from_matrix(returns: DMatrix<f64>) -> Self {
        Self { returns }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn n_rows(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }
}

pub fn daily_log_returns(panel: &PricePanel) -> ReturnPanel {
    let p = panel.prices();
    let rows = p.nrows().saturating_sub(1);
    let returns = DMatrix::from_fn(rows, p.ncols(), |d, i| (p[(d + 1, i)] / p[(d, i)]).log2());
    ReturnPanel { returns }
}

/// Partition of the return rows into periods of `days_per_period` rows.
///
/// Period `j` spans return rows `jK..(j+1)K`, i.e. price days `jK+1..=jK+K`,
/// and its orders execute at the close of price day `jK`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodGrid {
    window: usize,
    days_per_period: usize,
    n_periods: usize,
}

impl PeriodGrid {
    pub fn new(window: usize, days_per_period: usize, return_rows: usize) -> Result<Self, DataError> {
        if window == 0 || days_per_period == 0 {
            return Err(DataError::EmptyGrid);
        }
        Ok(Self {
            window,
            days_per_period,
            n_periods: return_rows / days_per_period,
        })
    }

    /// m, the number of past periods in a state.
    pub fn window(&self) -> usize {
        self.window
    }

    /// K, trading days per period.
    pub fn days_per_period(&self) -> usize {
        self.days_per_period
    }

    /// Complete periods available (trailing partial period dropped).
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn history_len(&self) -> usize {
        self.window * self.days_per_period
    }

    pub fn return_rows(&self, period: usize) -> Range<usize> {
        let k = self.days_per_period;
        period * k..(period + 1) * k
    }

    pub fn exec_price_day(&self, period: usize) -> usize {
        period * self.days_per_period
    }

    pub fn price_days(&self, period: usize) -> Range<usize> {
        let k = self.days_per_period;
        period * k + 1..period * k + k + 1
    }

    /// Return rows of the `m` periods preceding `period`.
    pub fn history_rows(&self, period: usize) -> Range<usize> {
        let k = self.days_per_period;
        (period - self.window) * k..period * k
    }

    /// Periods at which a decision can be taken and fully realized.
    pub fn decision_periods(&self) -> Range<usize> {
        self.window..self.n_periods.max(self.window)
    }
}

/// ⟨previous target weights, last m periods of daily returns⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub prev_weights: Vec<f64>,
    pub history: Arc<DMatrix<f64>>,
}

impl AgentState {
    pub fn n_assets(&self) -> usize {
        self.history.ncols()
    }
}

pub fn history_window(
    returns: &ReturnPanel,
    grid: &PeriodGrid,
    period: usize,
) -> Result<DMatrix<f64>, DataError> {
    let needed = grid.history_len();
    if period < grid.window() {
        return Err(DataError::InsufficientHistory {
            needed,
            available: period * grid.days_per_period(),
        });
    }
    let rows = grid.history_rows(period);
    if rows.end > returns.n_rows() {
        return Err(DataError::InsufficientHistory {
            needed: rows.end,
            available: returns.n_rows(),
        });
    }
    Ok(returns.matrix().rows(rows.start, rows.len()).into_owned())
}

pub fn build_state(
    returns: &ReturnPanel,
    grid: &PeriodGrid,
    period: usize,
    prev_weights: &[f64],
) -> Result<AgentState, DataError> {
    Ok(AgentState {
        prev_weights: prev_weights.to_vec(),
        history: Arc::new(history_window(returns, grid, period)?),
    })
}

/// Reads a ticker manifest: one symbol per line, `#` starts a comment.
pub fn parse_ticker_manifest(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

//! Result rows and their CSV/JSON rendering.

use serde::{Deserialize, Serialize};

/// One timed configuration. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Teams.
    pub n: usize,
    /// Threads per team.
    pub t: usize,
    /// Updates per thread and block.
    #[serde(rename = "T")]
    pub updates_per_thread: usize,
    pub dl: usize,
    pub du: usize,
    pub dt: usize,
    pub sync: String,
    pub storage: String,
    /// Node sweeps for pipelined variants, outer steps for distributed runs,
    /// plain time levels otherwise.
    pub sweeps: usize,
    /// Median wall time of the timed repetitions.
    pub seconds: f64,
    pub mlups: f64,
    /// Empty when verification was skipped.
    pub verified: Option<bool>,
}

impl BenchResult {
    /// Time levels per unit of `sweeps`.
    pub fn levels_per_sweep(&self) -> usize {
        match self.variant.as_str() {
            "naive" | "blocked" => 1,
            _ => self.n * self.t * self.updates_per_thread,
        }
    }

    pub fn updates(&self) -> u64 {
        (self.nx * self.ny * self.nz) as u64 * (self.sweeps * self.levels_per_sweep()) as u64
    }

    /// Sets `seconds` and derives `mlups` from it.
    pub fn set_seconds(&mut self, seconds: f64) {
        self.seconds = seconds;
        self.mlups = self.updates() as f64 / seconds / 1e6;
    }
}

pub const CSV_HEADER: &str = "variant,nx,ny,nz,n,t,T,dl,du,dt,sync,storage,sweeps,seconds,mlups,verified";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

pub fn to_csv(results: &[BenchResult]) -> String {
    if results.is_empty() {
        return format!("{CSV_HEADER}\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

pub fn from_csv(text: &str) -> Result<Vec<BenchResult>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

pub fn to_json(results: &[BenchResult]) -> String {
    serde_json::to_string_pretty(results).expect("results serialize") + "\n"
}

pub fn report(results: &[BenchResult], format: Format) -> String {
    match format {
        Format::Csv => to_csv(results),
        Format::Json => to_json(results),
    }
}

/// Median of a non-empty sample.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> BenchResult {
        let mut r = BenchResult {
            variant: "pipeline".into(),
            nx: 16,
            ny: 16,
            nz: 16,
            n: 1,
            t: 2,
            updates_per_thread: 2,
            dl: 1,
            du: 4,
            dt: 0,
            sync: "relaxed".into(),
            storage: "compressed".into(),
            sweeps: 3,
            seconds: 0.0,
            mlups: 0.0,
            verified: Some(true),
        };
        r.set_seconds(0.5);
        r
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
        assert_eq!(to_json(&[]).trim(), "[]");
    }

    #[test]
    fn one_row_gives_two_lines() {
        let text = to_csv(&[sample()]);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("pipeline,16,16,16,1,2,2,1,4,0,relaxed,compressed,3,0.5,"));
        assert!(lines[1].ends_with(",true"));
    }

    #[test]
    fn csv_and_json_carry_the_same_fields() {
        let mut skipped = sample();
        skipped.verified = None;
        let rows = vec![sample(), skipped];
        let csv_text = to_csv(&rows);
        assert!(csv_text.lines().nth(2).unwrap().ends_with(','));
        assert_eq!(from_csv(&csv_text).unwrap(), rows);
        let json: Vec<BenchResult> = serde_json::from_str(&to_json(&rows)).unwrap();
        assert_eq!(json, rows);
        let keys: Vec<String> = serde_json::from_str::<Vec<serde_json::Map<String, serde_json::Value>>>(&to_json(&rows)).unwrap()[0]
            .keys()
            .cloned()
            .collect();
        let mut expected: Vec<String> = CSV_HEADER.split(',').map(String::from).collect();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn rate_follows_updates() {
        let r = sample();
        assert_eq!(r.updates(), 4096 * 3 * 4);
        assert_eq!(r.mlups, 4096.0 * 12.0 / 0.5 / 1e6);
    }

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

//! Table drivers. A [`Workbench`] owns the loaded datasets, their pair
//! suites and the model store, and memoizes attack runs so that tables
//! sharing runs (attack success, quality, transfer) compute them once.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::store::ModelStore;
use super::suite::PairSuite;
use super::{derive_seed, ExperimentError};
use crate::attack::{transfer_check, AttackConfig, AttackKind, AttackRun};
use crate::codec::{Architecture, CodecModel};
use crate::defense::{quality_gap, LpdPolicy, Pipeline};
use crate::imageio::write_atomic;
use crate::metrics::{MeanStd, MetricReport};
use crate::tensor::Tensor;

/// A rendered table: a header row and string cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// CSV with `provenance` lines prefixed by `# `.
    pub fn to_csv(&self, provenance: &[String]) -> String {
        let mut s = String::new();
        for line in provenance {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Looks up a cell by row prefix (the leading key columns) and column
    /// name.
    pub fn cell(&self, key: &[&str], column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|h| h == column)?;
        self.rows
            .iter()
            .find(|r| r.iter().zip(key).all(|(a, b)| a == b))
            .map(|r| r[c].as_str())
    }
}

const DASH: &str = "-";

fn fmt_rate(r: f64) -> String {
    format!("{r:.2}")
}

fn fmt_ms(m: Option<MeanStd>) -> String {
    m.map_or_else(|| DASH.to_string(), |m| m.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RunKey {
    arch: Architecture,
    qf: u8,
    dataset: usize,
    kind: AttackKind,
    lpd: Option<LpdPolicy>,
    epsilon_bits: u64,
}

/// A loaded evaluation dataset.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub suite: PairSuite,
}

/// Rows of the transfer matrix (source model) by columns (target model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub archs: Vec<Architecture>,
    /// `cells[i][j]`: (transferred, successful on `archs[i]`), `None` on the
    /// diagonal.
    pub cells: Vec<Vec<Option<(usize, usize)>>>,
}

impl TransferMatrix {
    /// Transfer rate from `a` to `b`, `None` on the diagonal or when no
    /// attack on `a` succeeded.
    pub fn rate(&self, a: Architecture, b: Architecture) -> Option<f64> {
        let i = self.archs.iter().position(|&x| x == a)?;
        let j = self.archs.iter().position(|&x| x == b)?;
        self.cells[i][j].and_then(|(k, n)| (n > 0).then(|| k as f64 / n as f64))
    }

    pub fn table(&self) -> Table {
        let mut columns = vec!["source\\target".to_string()];
        columns.extend(self.archs.iter().map(|a| a.tag().to_string()));
        let rows = self
            .archs
            .iter()
            .zip(&self.cells)
            .map(|(a, row)| {
                let mut r = vec![a.tag().to_string()];
                r.extend(row.iter().map(|c| match c {
                    None | Some((_, 0)) => DASH.to_string(),
                    Some((k, n)) => format!("{} ({k}/{n})", fmt_rate(*k as f64 / *n as f64)),
                }));
                r
            })
            .collect();
        Table { columns, rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsPoint {
    pub epsilon: f64,
    pub asr: f64,
    /// Over all pairs, successful or not.
    pub msssim_to_src: f64,
    pub l2_to_src: f64,
}

pub struct Workbench {
    config: ExperimentConfig,
    hash: String,
    store: ModelStore,
    datasets: Vec<LoadedDataset>,
    pool: rayon::ThreadPool,
    runs: Mutex<HashMap<RunKey, Arc<Vec<AttackRun>>>>,
}

impl Workbench {
    /// Loads every dataset, draws the pair suites and prepares the model
    /// store (cached under `config.model_dir`, else `default_model_dir`).
    pub fn new(config: ExperimentConfig, default_model_dir: &Path) -> Result<Self, ExperimentError> {
        config.validate()?;
        let size = config.image_size;
        let train_images = config.train_data.load(size)?;
        let datasets = config
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let images = d.source.load(size)?;
                let suite = PairSuite::draw(&images, config.pairs, derive_seed(config.seed, i as u64))
                    .map_err(|e| ExperimentError::Config(format!("dataset {}: {e}", d.name)))?;
                Ok(LoadedDataset {
                    name: d.name.clone(),
                    images,
                    suite,
                })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        let dir = config
            .model_dir
            .clone()
            .unwrap_or_else(|| default_model_dir.to_path_buf());
        let store = ModelStore::new(dir, config.train.clone(), config.init_seed, train_images);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            hash: config.hash(),
            config,
            store,
            datasets,
            pool,
            runs: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn datasets(&self) -> &[LoadedDataset] {
        &self.datasets
    }

    pub fn store(&self) -> &ModelStore {
        &self.store
    }

    pub fn model(&self, arch: Architecture, qf: u8) -> Result<Arc<CodecModel>, ExperimentError> {
        self.store.get(arch, qf)
    }

    /// Trains (or loads) every model of the grid in parallel.
    pub fn prepare_models(&self) -> Result<(), ExperimentError> {
        let grid: Vec<(Architecture, u8)> = self
            .config
            .archs
            .iter()
            .flat_map(|&a| self.config.qfs.iter().map(move |&q| (a, q)))
            .collect();
        self.pool
            .install(|| grid.par_iter().try_for_each(|&(a, q)| self.model(a, q).map(|_| ())))
    }

    /// `config_hash=...` followed by one `model ...=sha256` line per model
    /// used so far.
    pub fn provenance(&self) -> Vec<String> {
        let mut lines = vec![format!("config_hash={}", self.hash)];
        lines.extend(self.store.digests().into_iter().map(|(k, v)| format!("model {k}={v}")));
        lines
    }

    fn attack_config(&self, lpd: Option<LpdPolicy>, epsilon: Option<f64>) -> AttackConfig {
        let mut c = self.config.attack.clone();
        c.lpd = lpd;
        if let Some(e) = epsilon {
            c.pgd_epsilon = e;
        }
        c
    }

    /// Attack runs over the suite of `dataset`, one per pair in suite order.
    /// `epsilon` overrides the configured PGD budget.
    pub fn runs(
        &self,
        arch: Architecture,
        qf: u8,
        dataset: usize,
        kind: AttackKind,
        lpd: Option<LpdPolicy>,
        epsilon: Option<f64>,
    ) -> Result<Arc<Vec<AttackRun>>, ExperimentError> {
        let ds = self
            .datasets
            .get(dataset)
            .ok_or_else(|| ExperimentError::Config(format!("no dataset #{dataset}")))?;
        let cfg = self.attack_config(lpd, epsilon);
        let key = RunKey {
            arch,
            qf,
            dataset,
            kind,
            lpd,
            epsilon_bits: if kind == AttackKind::Pgd {
                cfg.pgd_epsilon.to_bits()
            } else {
                0
            },
        };
        if let Some(r) = self.runs.lock().expect("run lock").get(&key) {
            return Ok(Arc::clone(r));
        }
        let model = self.model(arch, qf)?;
        let pairs = ds.suite.resolve(&ds.images);
        let runs: Vec<AttackRun> = self.pool.install(|| {
            pairs
                .par_iter()
                .map(|(src, tgt)| kind.run(&model, src, tgt, &cfg))
                .collect::<Result<Vec<_>, _>>()
        })?;
        log::info!(
            "{} {arch} QF{qf} {}: {}/{} collided",
            kind.tag(),
            ds.name,
            runs.iter().filter(|r| r.collided).count(),
            runs.len()
        );
        let runs = Arc::new(runs);
        self.runs.lock().expect("run lock").insert(key, Arc::clone(&runs));
        Ok(runs)
    }

    pub fn report(
        &self,
        arch: Architecture,
        qf: u8,
        dataset: usize,
        kind: AttackKind,
        lpd: Option<LpdPolicy>,
    ) -> Result<MetricReport, ExperimentError> {
        let runs = self.runs(arch, qf, dataset, kind, lpd, None)?;
        Ok(MetricReport::new(
            runs.iter().enumerate().map(|(i, r)| r.record(i)).collect(),
        )?)
    }

    fn grid_rows(&self) -> Vec<(u8, Architecture)> {
        self.config
            .qfs
            .iter()
            .flat_map(|&q| self.config.archs.iter().map(move |&a| (q, a)))
            .collect()
    }

    /// Attack success rates: rows QF by architecture, columns attack by
    /// dataset.
    pub fn table1(&self) -> Result<Table, ExperimentError> {
        let mut columns = vec!["qf".to_string(), "arch".to_string()];
        for d in &self.datasets {
            for k in &self.config.attacks {
                columns.push(format!("{}/{}", k.tag(), d.name));
            }
        }
        let mut rows = Vec::new();
        for (qf, arch) in self.grid_rows() {
            let mut row = vec![qf.to_string(), arch.tag().to_string()];
            for di in 0..self.datasets.len() {
                for &k in &self.config.attacks {
                    row.push(fmt_rate(self.report(arch, qf, di, k, None)?.aggregates.asr));
                }
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Quality of successful MGD collisions, mean±std; a dash where no pair
    /// collided.
    pub fn table2(&self) -> Result<Table, ExperimentError> {
        let mut columns = vec!["qf".to_string(), "arch".to_string()];
        for d in &self.datasets {
            for m in ["l2_src", "l2_tgt", "msssim_src", "msssim_tgt"] {
                columns.push(format!("{m}/{}", d.name));
            }
        }
        let mut rows = Vec::new();
        for (qf, arch) in self.grid_rows() {
            let mut row = vec![qf.to_string(), arch.tag().to_string()];
            for di in 0..self.datasets.len() {
                let a = self.report(arch, qf, di, AttackKind::Mgd, None)?.aggregates;
                row.extend([a.l2_to_src, a.l2_to_tgt, a.msssim_to_src, a.msssim_to_tgt].map(fmt_ms));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Transfer of successful MGD collisions at the lowest configured QF
    /// between every ordered pair of architectures.
    pub fn transfer(&self, dataset: usize) -> Result<TransferMatrix, ExperimentError> {
        let qf = *self.config.qfs.iter().min().expect("validated non-empty");
        let archs = self.config.archs.clone();
        let mut cells = Vec::with_capacity(archs.len());
        for &a in &archs {
            let runs = self.runs(a, qf, dataset, AttackKind::Mgd, None, None)?;
            let ok: Vec<&AttackRun> = runs.iter().filter(|r| r.collided).collect();
            let mut row = Vec::with_capacity(archs.len());
            for &b in &archs {
                if a == b {
                    row.push(None);
                    continue;
                }
                let target = self.model(b, qf)?;
                let mut k = 0;
                for r in &ok {
                    if transfer_check(&target, r)? {
                        k += 1;
                    }
                }
                row.push(Some((k, ok.len())));
            }
            cells.push(row);
        }
        Ok(TransferMatrix { archs, cells })
    }

    /// Undefended and LPD-defended MGD success at the lowest QF, and the
    /// PSNR cost of the defense on the dataset's images.
    pub fn table5(&self) -> Result<Table, ExperimentError> {
        let qf = *self.config.qfs.iter().min().expect("validated non-empty");
        let policy = self.config.lpd;
        let mut columns = vec!["arch".to_string()];
        for d in &self.datasets {
            columns.extend([
                format!("undefended/{}", d.name),
                format!("lpd/{}", d.name),
                format!("psnr_drop_db/{}", d.name),
            ]);
        }
        let mut rows = Vec::new();
        for &arch in &self.config.archs {
            let mut row = vec![arch.tag().to_string()];
            for (di, d) in self.datasets.iter().enumerate() {
                let plain = self.report(arch, qf, di, AttackKind::Mgd, None)?.aggregates.asr;
                let defended = if policy.is_active() {
                    self.report(arch, qf, di, AttackKind::Mgd, Some(policy))?.aggregates.asr
                } else {
                    plain
                };
                let gap = quality_gap(&*self.model(arch, qf)?, &d.images, policy)?;
                row.extend([
                    fmt_rate(plain),
                    fmt_rate(defended),
                    format!("{:.4}", gap.degradation_db()),
                ]);
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// PGD success and distortion against the budget, on the first
    /// architecture at the lowest QF.
    pub fn eps_sweep(&self, dataset: usize) -> Result<Vec<EpsPoint>, ExperimentError> {
        let qf = *self.config.qfs.iter().min().expect("validated non-empty");
        let arch = self.config.archs[0];
        let mut eps = self.config.epsilons.clone();
        eps.sort_by(f64::total_cmp);
        eps.iter()
            .map(|&e| {
                let runs = self.runs(arch, qf, dataset, AttackKind::Pgd, None, Some(e))?;
                let recs: Vec<_> = runs.iter().enumerate().map(|(i, r)| r.record(i)).collect();
                let n = recs.len() as f64;
                Ok(EpsPoint {
                    epsilon: e,
                    asr: MetricReport::new(recs.clone())?.aggregates.asr,
                    msssim_to_src: recs.iter().map(|r| r.msssim_to_src).sum::<f64>() / n,
                    l2_to_src: recs.iter().map(|r| r.l2_to_src).sum::<f64>() / n,
                })
            })
            .collect()
    }

    pub fn eps_table(&self, dataset: usize) -> Result<Table, ExperimentError> {
        let rows = self
            .eps_sweep(dataset)?
            .iter()
            .map(|p| {
                vec![
                    p.epsilon.to_string(),
                    fmt_rate(p.asr),
                    format!("{:.6}", p.msssim_to_src),
                    format!("{:.6}", p.l2_to_src),
                ]
            })
            .collect();
        Ok(Table {
            columns: ["epsilon", "asr", "msssim_to_src", "l2_to_src"]
                .map(String::from)
                .to_vec(),
            rows,
        })
    }

    /// Mean payload length in bits over every image of each dataset, and
    /// the ratio of raw 24-bit size to it.
    pub fn bitlength(&self) -> Result<Table, ExperimentError> {
        let mut columns = vec!["qf".to_string(), "arch".to_string()];
        for d in &self.datasets {
            columns.extend([format!("bits/{}", d.name), format!("ratio/{}", d.name)]);
        }
        let mut rows = Vec::new();
        for (qf, arch) in self.grid_rows() {
            let pipeline = Pipeline::new(&*self.model(arch, qf)?, LpdPolicy::INACTIVE);
            let mut row = vec![qf.to_string(), arch.tag().to_string()];
            for d in &self.datasets {
                let bits = d
                    .images
                    .iter()
                    .map(|img| Ok(pipeline.compress(img)?.payload.bit_length() as f64))
                    .collect::<Result<Vec<f64>, ExperimentError>>()?;
                let mean = bits.iter().sum::<f64>() / bits.len() as f64;
                let raw = (d.images[0].numel() * 8) as f64;
                row.extend([format!("{mean:.1}"), format!("{:.1}", raw / mean)]);
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Writes `table` as `name.csv` under `out` with the provenance header.
    pub fn write_table(&self, out: &Path, name: &str, table: &Table) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(out)?;
        write_atomic(
            &out.join(format!("{name}.csv")),
            table.to_csv(&self.provenance()).as_bytes(),
        )?;
        Ok(())
    }

    /// Saves every memoized run's artifacts under `out/runs/`.
    pub fn save_runs(&self, out: &Path) -> Result<(), ExperimentError> {
        let runs = self.runs.lock().expect("run lock").clone();
        for (key, list) in runs {
            let mut dir = format!(
                "{}-qf{}-{}-{}",
                key.arch,
                key.qf,
                self.datasets[key.dataset].name,
                key.kind.tag()
            );
            if key.lpd.is_some() {
                dir.push_str("-lpd");
            }
            if key.kind == AttackKind::Pgd {
                dir.push_str(&format!("-eps{}", f64::from_bits(key.epsilon_bits)));
            }
            for (i, r) in list.iter().enumerate() {
                r.save(&out.join("runs").join(&dir).join(format!("pair{i:03}")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TrainConfig;
    use crate::experiments::config::{DataSource, NamedSource};
    use crate::experiments::data::Synthetic;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let src = |seed| DataSource::Synthetic {
            generator: Synthetic::Faces,
            count: 6,
            seed,
        };
        ExperimentConfig {
            image_size: 32,
            train_data: src(1),
            datasets: vec![NamedSource {
                name: "f".into(),
                source: src(2),
            }],
            archs: vec![Architecture::FpGdn, Architecture::FpRelu],
            qfs: vec![1],
            pairs: 2,
            train: TrainConfig {
                steps: 5,
                batch: 2,
                crop: 16,
                ..TrainConfig::default()
            },
            attack: AttackConfig {
                max_iterations: 4,
                check_every: 2,
                ..AttackConfig::default()
            },
            attacks: vec![AttackKind::Mgd, AttackKind::Pgd],
            epsilons: vec![0.05, 0.01],
            model_dir: Some(dir.to_path_buf()),
            jobs: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tables_have_expected_shape_and_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let wb = Workbench::new(tiny(dir.path()), dir.path()).unwrap();
        let t1 = wb.table1().unwrap();
        assert_eq!(t1.columns, ["qf", "arch", "mgd/f", "pgd/f"]);
        assert_eq!(t1.rows.len(), 2);
        let t2 = wb.table2().unwrap();
        assert_eq!(t2.columns.len(), 6);
        let tm = wb.transfer(0).unwrap();
        let tt = tm.table();
        assert_eq!(tt.rows[0][1], "-");
        assert_eq!(tt.rows[1][2], "-");
        let eps = wb.eps_sweep(0).unwrap();
        assert_eq!(eps.iter().map(|p| p.epsilon).collect::<Vec<_>>(), [0.01, 0.05]);
        let bl = wb.bitlength().unwrap();
        assert!(bl.rows.iter().all(|r| r[2].parse::<f64>().unwrap() > 0.0));
        let csv = t1.to_csv(&wb.provenance());
        assert!(csv.starts_with("# config_hash="));
        assert!(csv.contains("# model fp-gdn-qf1="));

        let wb2 = Workbench::new(tiny(dir.path()), dir.path()).unwrap();
        assert_eq!(wb2.table1().unwrap().to_csv(&wb2.provenance()), csv);
        assert_eq!(wb2.table2().unwrap(), t2);
    }

    #[test]
    fn too_few_images_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            pairs: 4,
            ..tiny(dir.path())
        };
        assert!(matches!(
            Workbench::new(cfg, dir.path()),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn table_lookup() {
        let t = Table {
            columns: vec!["a".into(), "b".into(), "c".into()],
            rows: vec![vec!["1".into(), "x".into(), "0.5".into()]],
        };
        assert_eq!(t.cell(&["1", "x"], "c"), Some("0.5"));
        assert_eq!(t.cell(&["2"], "c"), None);
        assert_eq!(t.to_csv(&["p".into()]), "# p\na,b,c\n1,x,0.5\n");
    }
}

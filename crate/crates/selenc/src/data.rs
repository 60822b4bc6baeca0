//! Client datasets: seeded synthetic regression data or a CSV file.

use std::path::Path;

use rand_core::RngCore;

use selenc_core::model::{self, Dataset, ModelError, ModelShape};
use selenc_core::rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path} line {line}: {msg}")]
    Row { path: String, line: u64, msg: String },
    #[error("client {0} has no rows")]
    EmptyClient(usize),
}

/// Targets come from a seeded teacher model of the same shape, plus uniform
/// noise of half-width `noise`. Inputs are uniform(-1, 1).
pub fn synthetic(
    shape: &ModelShape,
    n_clients: usize,
    samples_per_client: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Dataset>, DataError> {
    let teacher = shape.init(rng::derive(seed, "teacher", 0, 0).next_u64());
    (0..n_clients)
        .map(|client| {
            let mut stream = rng::derive(seed, "data", client as u64, 0);
            let mut xs = Vec::with_capacity(samples_per_client);
            let mut ys = Vec::with_capacity(samples_per_client);
            for _ in 0..samples_per_client {
                let x: Vec<f64> = (0..shape.input_dim()).map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
                let mut y = model::forward(&teacher, shape, &x)?;
                for v in &mut y {
                    *v += rng::uniform(&mut stream, -noise, noise);
                }
                xs.push(x);
                ys.push(y);
            }
            Ok(Dataset::new(xs, ys)?)
        })
        .collect()
}

/// Rows of `client, x_1..x_d, y_1..y_o` with a header line.
pub fn load_csv(path: &Path, shape: &ModelShape, n_clients: usize) -> Result<Vec<Dataset>, DataError> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| DataError::Csv { path: name.clone(), source })?;
    let (d, o) = (shape.input_dim(), shape.output_dim());
    let mut xs = vec![Vec::new(); n_clients];
    let mut ys = vec![Vec::new(); n_clients];
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv { path: name.clone(), source })?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |msg: String| DataError::Row { path: name.clone(), line, msg };
        if record.len() != 1 + d + o {
            return Err(row_err(format!("expected {} columns, found {}", 1 + d + o, record.len())));
        }
        let client: usize = record[0].parse().map_err(|_| row_err(format!("bad client id {:?}", &record[0])))?;
        if client >= n_clients {
            return Err(row_err(format!("client {client} but n_clients is {n_clients}")));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|_| row_err(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        xs[client].push(values[..d].to_vec());
        ys[client].push(values[d..].to_vec());
    }
    xs.into_iter()
        .zip(ys)
        .enumerate()
        .map(|(client, (x, y))| {
            if x.is_empty() {
                return Err(DataError::EmptyClient(client));
            }
            Ok(Dataset::new(x, y)?)
        })
        .collect()
}

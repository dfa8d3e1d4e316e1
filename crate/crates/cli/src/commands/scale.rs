use serde::Serialize;
use vpmap_core::structure::generalized_variance;
use vpmap_core::{icar_structure, rw_structure, scale_structure, StructureMatrix};

use crate::commands::fit::load_graph;
use crate::config::{resolve, Command, StructureChoice};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::Invocation;

#[derive(Debug, Clone, Serialize)]
pub struct ScaleReport {
    pub structure: StructureChoice,
    pub n: usize,
    pub gv_before: f64,
    pub gv_after: f64,
    pub rank: usize,
    pub null_dim: usize,
}

impl ScaleReport {
    pub fn text(&self) -> String {
        format!(
            "structure: {:?}\nn: {}\ngv_before: {:.17e}\ngv_after: {:.17e}\nrank: {}\nnull_dim: {}\n",
            self.structure, self.n, self.gv_before, self.gv_after, self.rank, self.null_dim
        )
    }
}

pub fn scale_report(structure: StructureChoice, raw: &StructureMatrix) -> CliResult<(ScaleReport, StructureMatrix)> {
    let gv_before = generalized_variance(raw)?;
    let scaled = scale_structure(raw)?;
    let gv_after = generalized_variance(&scaled)?;
    let spec = scaled.spectral()?;
    Ok((
        ScaleReport {
            structure,
            n: scaled.order(),
            gv_before,
            gv_after,
            rank: spec.rank(),
            null_dim: spec.null_dim(),
        },
        scaled,
    ))
}

fn matrix_csv(m: &StructureMatrix) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::numerical(format!("matrix csv: {e}"));
    let a = m.matrix();
    for i in 0..a.nrows() {
        w.write_record((0..a.ncols()).map(|j| a[(i, j)].to_string())).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::numerical(format!("matrix csv: {e}")))
}

pub fn run(inv: &Invocation) -> CliResult<ScaleReport> {
    inv.config.validate(Command::Scale)?;
    let s = inv.config.scale.as_ref().expect("validated");
    let mut graph_path = None;
    let raw = match s.structure {
        StructureChoice::Rw1 => rw_structure(s.n.expect("validated"), 1)?,
        StructureChoice::Rw2 => rw_structure(s.n.expect("validated"), 2)?,
        StructureChoice::Icar => {
            let p = resolve(&inv.base_dir, s.graph.as_deref().expect("validated"));
            let g = load_graph(&p)?;
            graph_path = Some(p);
            icar_structure(&g)?
        }
    };
    let (report, scaled) = scale_report(s.structure, &raw)?;
    print!("{}", report.text());

    let mut out = OutputDir::create(&inv.output_dir())?;
    out.write_json("scale_report.json", &report)?;
    if s.dump_matrix {
        out.write("scaled_matrix.csv", &matrix_csv(&scaled)?)?;
    }
    let mut manifest = inv.manifest(Command::Scale, None, 1);
    if let Some(p) = graph_path {
        manifest.add_input("graph", &p)?;
    }
    manifest.finish(&mut out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rw1_three_points() {
        let (r, _) = scale_report(StructureChoice::Rw1, &rw_structure(3, 1).unwrap()).unwrap();
        assert!((r.gv_before - (50.0_f64 / 729.0).cbrt()).abs() < 1e-10);
        assert!((r.gv_after - 1.0).abs() < 1e-10);
        assert_eq!((r.rank, r.null_dim), (2, 1));
    }

    #[test]
    fn rw2_null_dimension() {
        let (r, _) = scale_report(StructureChoice::Rw2, &rw_structure(10, 2).unwrap()).unwrap();
        assert_eq!(r.null_dim, 2);
        assert_eq!(r.rank, 8);
    }
}

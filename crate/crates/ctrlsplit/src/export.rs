//! Latent dumps, plan rollouts and probe reports as CSV / SVG.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use ctrlsplit_core::evalviz::{LatentDump, ProbeReport};
use ctrlsplit_core::nets::ZU_MAP_SIDE;

pub fn latents_csv(dump: &LatentDump) -> String {
    let mut s = String::from("env,group");
    for name in &dump.state_names {
        write!(s, ",{}", name).unwrap();
    }
    if let Some(r) = dump.rows.first() {
        for i in 0..r.zc.len() {
            write!(s, ",zc_{}", i).unwrap();
        }
        for i in 0..r.zu.len() {
            write!(s, ",zu_{}", i).unwrap();
        }
        for (a, p) in r.predicted.iter().enumerate() {
            for i in 0..p.len() {
                write!(s, ",pred_a{}_{}", a, i).unwrap();
            }
        }
    }
    s.push('\n');
    for r in &dump.rows {
        write!(s, "{},{}", dump.env.name(), r.group).unwrap();
        for v in &r.state {
            write!(s, ",{}", v).unwrap();
        }
        for v in r.zc.iter().chain(&r.zu).chain(r.predicted.iter().flatten()) {
            write!(s, ",{}", v).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn rollout_csv(actions: &[usize], points: &[Vec<f32>]) -> String {
    let n_c = points.first().map_or(0, Vec::len);
    let mut s = String::from("step,kind,action");
    for i in 0..n_c {
        write!(s, ",zc_{}", i).unwrap();
    }
    s.push('\n');
    for (k, p) in points.iter().enumerate() {
        let kind = if k == 0 {
            "root"
        } else if k + 1 == points.len() {
            "leaf"
        } else {
            "intermediate"
        };
        write!(s, "{},{},{}", k, kind, actions[k]).unwrap();
        for v in p {
            write!(s, ",{}", v).unwrap();
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const PANEL: f64 = 400.0;
const MARGIN: f64 = 30.0;

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        for d in 0..2 {
            // also catches an empty or non-finite range
            if hi[d].is_nan() || lo[d].is_nan() || hi[d] <= lo[d] {
                let c = if lo[d].is_finite() { lo[d] } else { 0.0 };
                lo[d] = c - 1.0;
                hi[d] = c + 1.0;
            }
        }
        Self { lo, hi }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let x = MARGIN + (p[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * (PANEL - 2.0 * MARGIN);
        let y = PANEL - MARGIN - (p[1] - self.lo[1]) / (self.hi[1] - self.lo[1]) * (PANEL - 2.0 * MARGIN);
        (x, y)
    }
}

/// First two z^c coordinates (the second is 0 for one-dimensional z^c).
fn xy(z: &[f32]) -> [f64; 2] {
    [z[0] as f64, z.get(1).copied().unwrap_or(0.0) as f64]
}

fn heat(v: f32, lo: f32, hi: f32) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let c = (255.0 * (1.0 - t)).round() as u8;
    format!("rgb({},{},255)", c, c)
}

/// Left: z^c scatter coloured by group with one arrow per action to the
/// predicted next z^c (and the plan path, if given). Right: z^u of the first
/// state of each group, as a 6×6 heatmap or a strip.
pub fn latents_svg(dump: &LatentDump, title: &str, rollout: Option<&[Vec<f32>]>) -> String {
    let mut pts: Vec<[f64; 2]> = dump.rows.iter().flat_map(|r| std::iter::once(xy(&r.zc)).chain(r.predicted.iter().map(|p| xy(p)))).collect();
    if let Some(path) = rollout {
        pts.extend(path.iter().map(|p| xy(p)));
    }
    let frame = Frame::fit(pts.into_iter());
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = 2.0 * PANEL,
        h = PANEL + 20.0
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="10" y="16" font-family="sans-serif" font-size="12">{}</text>"#, title).unwrap();
    writeln!(s, r#"<g transform="translate(0,20)">"#).unwrap();
    writeln!(s, r##"<rect x="0.5" y="0.5" width="{}" height="{}" fill="none" stroke="#999"/>"##, PANEL - 1.0, PANEL - 1.0).unwrap();
    for r in &dump.rows {
        let (x0, y0) = frame.map(xy(&r.zc));
        for p in &r.predicted {
            let (x1, y1) = frame.map(xy(p));
            writeln!(s, r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#aaa" stroke-width="0.6"/>"##, x0, y0, x1, y1).unwrap();
        }
    }
    let groups: Vec<u64> = {
        let mut g: Vec<u64> = dump.rows.iter().map(|r| r.group).collect();
        g.dedup();
        g.sort_unstable();
        g.dedup();
        g
    };
    for r in &dump.rows {
        let (x, y) = frame.map(xy(&r.zc));
        let gi = groups.binary_search(&r.group).unwrap_or(0);
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#, x, y, PALETTE[gi % PALETTE.len()]).unwrap();
    }
    if let Some(path) = rollout {
        let coords: Vec<String> = path.iter().map(|p| frame.map(xy(p))).map(|(x, y)| format!("{:.2},{:.2}", x, y)).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, coords.join(" ")).unwrap();
        for (k, c) in coords.iter().enumerate() {
            let (x, y) = c.split_once(',').unwrap();
            let fill = if k == 0 { "black" } else if k + 1 == coords.len() { "orange" } else { "gray" };
            writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#, x, y, fill).unwrap();
        }
    }

    // z^u panel
    let firsts: Vec<&[f32]> = groups
        .iter()
        .take(PALETTE.len())
        .filter_map(|g| dump.rows.iter().find(|r| r.group == *g).map(|r| r.zu.as_slice()))
        .collect();
    let (lo, hi) = firsts.iter().flat_map(|z| z.iter()).fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let map = ZU_MAP_SIDE * ZU_MAP_SIDE;
    let cols = 4usize;
    let cell_w = (PANEL - 2.0 * MARGIN) / cols as f64;
    for (i, zu) in firsts.iter().enumerate() {
        let ox = PANEL + MARGIN + (i % cols) as f64 * cell_w;
        let oy = MARGIN + (i / cols) as f64 * (cell_w + 20.0);
        let (side_r, side_c) = if zu.len() == map { (ZU_MAP_SIDE, ZU_MAP_SIDE) } else { (1, zu.len()) };
        let px = (cell_w - 8.0) / side_c.max(side_r) as f64;
        for (k, v) in zu.iter().enumerate() {
            let (r, c) = (k / side_c, k % side_c);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                ox + c as f64 * px,
                oy + r as f64 * px,
                px,
                px,
                heat(*v, lo, hi)
            )
            .unwrap();
        }
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{}" stroke-width="2"/>"##,
            ox,
            oy,
            side_c as f64 * px,
            side_r as f64 * px,
            PALETTE[i % PALETTE.len()]
        )
        .unwrap();
    }
    writeln!(s, "</g>\n</svg>").unwrap();
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub const PROBES_HEADER: &str = "checkpoint,metric,value,baseline,split,seed";

/// Appends one row to `probes.csv`, creating it with a header.
pub fn append_probe(path: &Path, checkpoint: &str, r: &ProbeReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{}", PROBES_HEADER)?;
    }
    let quote = |s: &str| if s.contains(',') || s.contains('"') { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
    writeln!(f, "{},{},{},{},{},{}", quote(checkpoint), r.metric, r.value, r.baseline, quote(&r.split), r.seed)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctrlsplit_core::envs::EnvKind;
    use ctrlsplit_core::evalviz::LatentRow;

    fn dump() -> LatentDump {
        let row = |g, c: usize, z: f32| LatentRow {
            group: g,
            state: vec![1, c],
            zc: vec![z, -z],
            zu: vec![0.5],
            predicted: vec![vec![z + 0.1, -z]; 4],
            next_zc: vec![vec![z, -z]; 4],
        };
        LatentDump { env: EnvKind::QuadMaze, state_names: vec!["row", "col"], rows: vec![row(0, 1, 0.25), row(1, 2, -1.5)] }
    }

    #[test]
    fn csv_layout() {
        let text = latents_csv(&dump());
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("env,group,row,col,zc_0,zc_1,zu_0,pred_a0_0,pred_a0_1,pred_a1_0"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
        assert!(lines[1].starts_with("quadmaze,0,1,1,0.25,-0.25,0.5,0.35"));
    }

    #[test]
    fn svg_is_well_formed_and_stable() {
        let a = latents_svg(&dump(), "t", Some(&[vec![0.0, 0.0], vec![1.0, 1.0]]));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<line").count(), 8);
        assert_eq!(a, latents_svg(&dump(), "t", Some(&[vec![0.0, 0.0], vec![1.0, 1.0]])));
    }

    #[test]
    fn rollout_kinds() {
        let text = rollout_csv(&[2, 0, 1], &[vec![0.0], vec![1.0], vec![2.0]]);
        assert_eq!(text, "step,kind,action,zc_0\n0,root,2,0\n1,intermediate,0,1\n2,leaf,1,2\n");
    }
}

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene_model::{Gaussian, GaussianMap};

const HEADER: &str = "# dynsplat-map 1";

/// Text form of a map: a version header, a `next_id` line, then one line per
/// Gaussian:
///
/// `id px py pz qw qx qy qz sx sy sz opacity r g b anchor alive`
///
/// Floats use the shortest representation that parses back to the same value.
pub fn map_to_string(map: &GaussianMap) -> String {
    let mut s = String::new();
    writeln!(s, "{HEADER}").unwrap();
    writeln!(s, "next_id {}", map.next_id).unwrap();
    for g in &map.gaussians {
        let p = &g.position;
        let q = &g.rotation;
        let sc = &g.scale;
        let c = &g.color;
        writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            g.id,
            p.x,
            p.y,
            p.z,
            q.w,
            q.i,
            q.j,
            q.k,
            sc.x,
            sc.y,
            sc.z,
            g.opacity,
            c.x,
            c.y,
            c.z,
            g.anchor_keyframe,
            u8::from(g.alive)
        )
        .unwrap();
    }
    s
}

pub fn map_from_str(text: &str) -> Result<GaussianMap> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(Error::Format(format!("missing header '{HEADER}'"))),
    }
    let next_id = match lines.next() {
        Some((i, l)) => {
            let mut it = l.split_whitespace();
            match (it.next(), it.next().map(str::parse::<u64>), it.next()) {
                (Some("next_id"), Some(Ok(v)), None) => v,
                _ => return Err(Error::Parse { line: i + 1, msg: "expected 'next_id <n>'".into() }),
            }
        }
        None => return Err(Error::Format("missing next_id line".into())),
    };
    let mut map = GaussianMap { gaussians: Vec::new(), next_id };
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(Error::Parse { line: line_no, msg: format!("expected 17 fields, got {}", fields.len()) });
        }
        let f = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: line_no, msg: format!("field {}: {e}", j + 1) })
        };
        let id = fields[0]
            .parse::<u64>()
            .map_err(|e| Error::Parse { line: line_no, msg: format!("id: {e}") })?;
        let anchor = fields[15]
            .parse::<usize>()
            .map_err(|e| Error::Parse { line: line_no, msg: format!("anchor: {e}") })?;
        let alive = match fields[16] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse { line: line_no, msg: format!("alive flag '{other}'") }),
        };
        let g = Gaussian {
            id,
            position: Vector3::new(f(1)?, f(2)?, f(3)?),
            rotation: Quaternion::new(f(4)?, f(5)?, f(6)?, f(7)?),
            scale: Vector3::new(f(8)?, f(9)?, f(10)?),
            opacity: f(11)?,
            color: Vector3::new(f(12)?, f(13)?, f(14)?),
            anchor_keyframe: anchor,
            alive,
        };
        if id >= next_id {
            return Err(Error::Parse { line: line_no, msg: format!("id {id} not below next_id {next_id}") });
        }
        map.gaussians.push(g);
    }
    Ok(map)
}

pub fn write_map(path: &Path, map: &GaussianMap) -> Result<()> {
    std::fs::write(path, map_to_string(map))?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<GaussianMap> {
    map_from_str(&std::fs::read_to_string(path)?)
}

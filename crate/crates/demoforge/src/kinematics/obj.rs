//! ASCII OBJ subset: `v x y z` vertex records and `f i j k` triangle records
//! with 1-based plain indices. Blank lines and `#` comments are allowed;
//! anything else is rejected with its line number.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::Triangle;

#[derive(Debug, Error)]
#[error("obj line {line}: {message}")]
pub struct ObjError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ObjError {
    ObjError { line, message: message.into() }
}

pub fn parse_obj(text: &str) -> Result<Vec<Triangle>, ObjError> {
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut triangles: Vec<Triangle> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let record = fields.next().expect("non-empty line has a first field");
        let rest: Vec<&str> = fields.collect();
        match record {
            "v" => {
                if rest.len() != 3 {
                    return Err(err(line_no, format!("vertex record needs 3 coordinates, got {}", rest.len())));
                }
                let mut c = [0.0f64; 3];
                for (k, f) in rest.iter().enumerate() {
                    c[k] = f
                        .parse::<f64>()
                        .map_err(|_| err(line_no, format!("bad vertex coordinate `{f}`")))?;
                }
                vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(err(line_no, format!("only triangles are supported, face has {} indices", rest.len())));
                }
                let mut tri = [Vector3::zeros(); 3];
                for (k, f) in rest.iter().enumerate() {
                    let idx: usize = f
                        .parse()
                        .map_err(|_| err(line_no, format!("bad face index `{f}` (plain 1-based indices only)")))?;
                    if idx == 0 || idx > vertices.len() {
                        return Err(err(line_no, format!("face index {idx} out of range (have {} vertices)", vertices.len())));
                    }
                    tri[k] = vertices[idx - 1];
                }
                triangles.push(tri);
            }
            other => {
                return Err(err(line_no, format!("unsupported record `{other}` (subset allows v and f)")));
            }
        }
    }
    Ok(triangles)
}

/// Inverse of [`parse_obj`]: three vertices per triangle, no deduplication.
/// Floats are printed with the shortest round-trip representation, so
/// parsing the output reproduces the exact input values.
pub fn write_obj(triangles: &[Triangle]) -> String {
    let mut out = String::new();
    for t in triangles {
        for v in t {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
    }
    for (i, _) in triangles.iter().enumerate() {
        let b = 3 * i + 1;
        out.push_str(&format!("f {} {} {}\n", b, b + 1, b + 2));
    }
    out
}

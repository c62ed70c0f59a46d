//! Robot-model text format: a strict URDF subset.
//!
//! Grammar (XML-like, attributes always quoted, no text content):
//!
//! ```text
//! <robot name="arm">
//!   <link name="base"/>
//!   <link name="upper">
//!     <box size="0.35 0.05 0.03" origin_xyz="0.175 0 0" origin_rpy="0 0 0"/>
//!     <mesh file="claw.obj"/>
//!   </link>
//!   <joint name="j1" type="revolute">
//!     <parent link="base"/>
//!     <child link="upper"/>
//!     <origin xyz="0 0 0" rpy="0 0 0"/>
//!     <axis xyz="0 0 1"/>
//!     <limit lower="-3.05" upper="3.05"/>
//!   </joint>
//! </robot>
//! ```
//!
//! Joint types are `revolute`, `prismatic`, and `fixed`. Fixed joints take
//! neither `axis` nor `limit`. Boxes are expanded to 12 triangles when
//! parsed; `mesh file` references are resolved through a [`MeshSource`] and
//! must be in the OBJ subset. Unknown elements and attributes are errors,
//! never silently skipped, and syntax errors carry line and column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{Pose, Triangle};
use crate::kinematics::obj::{parse_obj, write_obj, ObjError};
use crate::kinematics::{JointKind, JointSpec, Link, ModelError, RobotModel};

#[derive(Debug, Error)]
pub enum UrdfError {
    #[error("line {line}, column {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mesh `{file}`: {message}")]
    MeshLoad { file: String, message: String },
    #[error("mesh `{file}`: {source}")]
    MeshParse {
        file: String,
        #[source]
        source: ObjError,
    },
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> UrdfError {
    UrdfError::Syntax { line, col, message: message.into() }
}

/// Resolves `mesh file="..."` references.
pub trait MeshSource {
    fn load(&self, file: &str) -> Result<String, String>;
}

/// Rejects every mesh reference; for models that only use boxes.
pub struct NoMeshes;

impl MeshSource for NoMeshes {
    fn load(&self, _file: &str) -> Result<String, String> {
        Err("model references an external mesh but no mesh source was provided".into())
    }
}

/// Loads meshes from files next to the model.
pub struct DirSource(pub PathBuf);

impl MeshSource for DirSource {
    fn load(&self, file: &str) -> Result<String, String> {
        std::fs::read_to_string(self.0.join(file)).map_err(|e| e.to_string())
    }
}

/// In-memory mesh lookup; used by the serializer round trip and tests.
pub struct MapSource(pub BTreeMap<String, String>);

impl MeshSource for MapSource {
    fn load(&self, file: &str) -> Result<String, String> {
        self.0.get(file).cloned().ok_or_else(|| "not present in mesh map".into())
    }
}

pub fn parse_robot_model(text: &str) -> Result<RobotModel, UrdfError> {
    parse_robot_model_with(text, &NoMeshes)
}

pub fn parse_robot_model_with(text: &str, meshes: &dyn MeshSource) -> Result<RobotModel, UrdfError> {
    let root = parse_document(text)?;
    build_model(&root, meshes)
}

// ---------------------------------------------------------------------------
// Minimal XML reader with positions.

#[derive(Debug)]
struct Element {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Element>,
    line: usize,
    col: usize,
}

impl Element {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn require_attr(&self, name: &str) -> Result<&str, UrdfError> {
        self.attr(name)
            .ok_or_else(|| syntax(self.line, self.col, format!("<{}> is missing attribute `{}`", self.name, name)))
    }

    fn check_attrs(&self, allowed: &[&str]) -> Result<(), UrdfError> {
        for (k, _) in &self.attrs {
            if !allowed.contains(&k.as_str()) {
                return Err(syntax(
                    self.line,
                    self.col,
                    format!("unsupported attribute `{}` on <{}>", k, self.name),
                ));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Reader<'a> {
    fn new(src: &'a str) -> Self {
        Self { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn starts_with(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s.as_bytes())
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.starts_with(s) {
            for _ in 0..s.len() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn skip_space_and_comments(&mut self) -> Result<(), UrdfError> {
        loop {
            while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
                self.bump();
            }
            if self.starts_with("<!--") {
                let (l, c) = (self.line, self.col);
                self.eat("<!--");
                loop {
                    if self.eat("-->") {
                        break;
                    }
                    if self.bump().is_none() {
                        return Err(syntax(l, c, "unterminated comment"));
                    }
                }
            } else {
                return Ok(());
            }
        }
    }

    fn read_name(&mut self) -> Result<String, UrdfError> {
        let (l, c) = (self.line, self.col);
        let mut name = String::new();
        while let Some(ch) = self.peek() {
            if ch.is_ascii_alphanumeric() || ch == b'_' || ch == b'-' {
                name.push(ch as char);
                self.bump();
            } else {
                break;
            }
        }
        if name.is_empty() {
            return Err(syntax(l, c, "expected a name"));
        }
        Ok(name)
    }

    fn read_element(&mut self) -> Result<Element, UrdfError> {
        let (line, col) = (self.line, self.col);
        if !self.eat("<") {
            return Err(syntax(line, col, "expected `<`"));
        }
        let name = self.read_name()?;
        let mut attrs = Vec::new();
        loop {
            self.skip_space_and_comments()?;
            match self.peek() {
                Some(b'/') => {
                    self.bump();
                    if !self.eat(">") {
                        return Err(syntax(self.line, self.col, "expected `>` after `/`"));
                    }
                    return Ok(Element { name, attrs, children: Vec::new(), line, col });
                }
                Some(b'>') => {
                    self.bump();
                    let children = self.read_children(&name)?;
                    return Ok(Element { name, attrs, children, line, col });
                }
                Some(_) => {
                    let (al, ac) = (self.line, self.col);
                    let key = self.read_name()?;
                    if !self.eat("=") {
                        return Err(syntax(al, ac, format!("attribute `{key}` is missing `=`")));
                    }
                    if !self.eat("\"") {
                        return Err(syntax(self.line, self.col, "attribute values must be double-quoted"));
                    }
                    let mut value = String::new();
                    loop {
                        match self.bump() {
                            Some(b'"') => break,
                            Some(b'\n') | None => {
                                return Err(syntax(al, ac, format!("unterminated value for attribute `{key}`")))
                            }
                            Some(ch) => value.push(ch as char),
                        }
                    }
                    if attrs.iter().any(|(k, _)| *k == key) {
                        return Err(syntax(al, ac, format!("duplicate attribute `{key}`")));
                    }
                    attrs.push((key, value));
                }
                None => return Err(syntax(self.line, self.col, "unexpected end of input inside a tag")),
            }
        }
    }

    fn read_children(&mut self, parent: &str) -> Result<Vec<Element>, UrdfError> {
        let mut children = Vec::new();
        loop {
            self.skip_space_and_comments()?;
            if self.starts_with("</") {
                let (l, c) = (self.line, self.col);
                self.eat("</");
                let name = self.read_name()?;
                if name != parent {
                    return Err(syntax(l, c, format!("closing tag `</{name}>` does not match `<{parent}>`")));
                }
                self.skip_space_and_comments()?;
                if !self.eat(">") {
                    return Err(syntax(self.line, self.col, "expected `>`"));
                }
                return Ok(children);
            }
            match self.peek() {
                Some(b'<') => children.push(self.read_element()?),
                Some(_) => {
                    return Err(syntax(self.line, self.col, "text content is not part of the format"));
                }
                None => return Err(syntax(self.line, self.col, format!("missing closing tag for <{parent}>"))),
            }
        }
    }
}

fn parse_document(text: &str) -> Result<Element, UrdfError> {
    let mut r = Reader::new(text);
    r.skip_space_and_comments()?;
    if r.peek().is_none() {
        return Err(syntax(r.line, r.col, "empty document"));
    }
    let root = r.read_element()?;
    r.skip_space_and_comments()?;
    if r.peek().is_some() {
        return Err(syntax(r.line, r.col, "content after the root element"));
    }
    Ok(root)
}

// ---------------------------------------------------------------------------
// Mapping onto the model types.

fn parse_floats<const N: usize>(el: &Element, attr: &str, value: &str) -> Result<[f64; N], UrdfError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != N {
        return Err(syntax(
            el.line,
            el.col,
            format!("attribute `{attr}` on <{}> needs {N} numbers, got {}", el.name, parts.len()),
        ));
    }
    let mut out = [0.0; N];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<f64>()
            .map_err(|_| syntax(el.line, el.col, format!("bad number `{p}` in attribute `{attr}`")))?;
    }
    Ok(out)
}

/// Axis-aligned box centered on its origin pose, expanded to 12 triangles.
pub fn box_triangles(size: [f64; 3], origin: &Pose) -> Vec<Triangle> {
    let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let corner = |sx: f64, sy: f64, sz: f64| {
        origin.transform_point(&Vector3::new(sx * h[0], sy * h[1], sz * h[2]))
    };
    // Corner layout: bit 0 = +x, bit 1 = +y, bit 2 = +z.
    let c: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            corner(
                if i & 1 == 1 { 1.0 } else { -1.0 },
                if i & 2 == 2 { 1.0 } else { -1.0 },
                if i & 4 == 4 { 1.0 } else { -1.0 },
            )
        })
        .collect();
    let quads: [[usize; 4]; 6] = [
        [1, 3, 7, 5], // +x
        [0, 4, 6, 2], // -x
        [2, 6, 7, 3], // +y
        [0, 1, 5, 4], // -y
        [4, 5, 7, 6], // +z
        [0, 2, 3, 1], // -z
    ];
    let mut tris = Vec::with_capacity(12);
    for q in quads {
        tris.push([c[q[0]], c[q[1]], c[q[2]]]);
        tris.push([c[q[0]], c[q[2]], c[q[3]]]);
    }
    tris
}

fn build_model(root: &Element, meshes: &dyn MeshSource) -> Result<RobotModel, UrdfError> {
    if root.name != "robot" {
        return Err(syntax(root.line, root.col, format!("root element must be <robot>, found <{}>", root.name)));
    }
    root.check_attrs(&["name"])?;
    let name = root.attr("name").unwrap_or("robot").to_string();

    let mut links = Vec::new();
    let mut joints = Vec::new();

    for child in &root.children {
        match child.name.as_str() {
            "link" => links.push(build_link(child, meshes)?),
            "joint" => joints.push(build_joint(child)?),
            other => {
                return Err(syntax(child.line, child.col, format!("unsupported element <{other}> inside <robot>")));
            }
        }
    }

    Ok(RobotModel::new(name, links, joints)?)
}

fn build_link(el: &Element, meshes: &dyn MeshSource) -> Result<Link, UrdfError> {
    el.check_attrs(&["name"])?;
    let name = el.require_attr("name")?.to_string();
    let mut mesh: Vec<Triangle> = Vec::new();
    for g in &el.children {
        match g.name.as_str() {
            "box" => {
                g.check_attrs(&["size", "origin_xyz", "origin_rpy"])?;
                let size = parse_floats::<3>(g, "size", g.require_attr("size")?)?;
                if size.iter().any(|s| *s <= 0.0) {
                    return Err(syntax(g.line, g.col, "box sizes must be positive"));
                }
                let xyz = match g.attr("origin_xyz") {
                    Some(v) => parse_floats::<3>(g, "origin_xyz", v)?,
                    None => [0.0; 3],
                };
                let rpy = match g.attr("origin_rpy") {
                    Some(v) => parse_floats::<3>(g, "origin_rpy", v)?,
                    None => [0.0; 3],
                };
                mesh.extend(box_triangles(size, &Pose::from_xyz_rpy(xyz, rpy)));
            }
            "mesh" => {
                g.check_attrs(&["file"])?;
                let file = g.require_attr("file")?;
                let text = meshes
                    .load(file)
                    .map_err(|message| UrdfError::MeshLoad { file: file.to_string(), message })?;
                let tris = parse_obj(&text)
                    .map_err(|source| UrdfError::MeshParse { file: file.to_string(), source })?;
                mesh.extend(tris);
            }
            other => {
                return Err(syntax(g.line, g.col, format!("unsupported element <{other}> inside <link>")));
            }
        }
    }
    Ok(Link { name, mesh })
}

fn build_joint(el: &Element) -> Result<JointSpec, UrdfError> {
    el.check_attrs(&["name", "type"])?;
    let name = el.require_attr("name")?.to_string();
    let kind = match el.require_attr("type")? {
        "revolute" => JointKind::Revolute,
        "prismatic" => JointKind::Prismatic,
        "fixed" => JointKind::Fixed,
        other => {
            return Err(syntax(el.line, el.col, format!("unsupported joint type `{other}`")));
        }
    };

    let mut parent: Option<String> = None;
    let mut child: Option<String> = None;
    let mut origin_xyz = [0.0; 3];
    let mut origin_rpy = [0.0; 3];
    let mut seen_origin = false;
    let mut axis: Option<Vector3<f64>> = None;
    let mut limits: Option<(f64, f64)> = None;

    for c in &el.children {
        match c.name.as_str() {
            "parent" => {
                c.check_attrs(&["link"])?;
                if parent.replace(c.require_attr("link")?.to_string()).is_some() {
                    return Err(syntax(c.line, c.col, "duplicate <parent>"));
                }
            }
            "child" => {
                c.check_attrs(&["link"])?;
                if child.replace(c.require_attr("link")?.to_string()).is_some() {
                    return Err(syntax(c.line, c.col, "duplicate <child>"));
                }
            }
            "origin" => {
                c.check_attrs(&["xyz", "rpy"])?;
                if seen_origin {
                    return Err(syntax(c.line, c.col, "duplicate <origin>"));
                }
                seen_origin = true;
                if let Some(v) = c.attr("xyz") {
                    origin_xyz = parse_floats::<3>(c, "xyz", v)?;
                }
                if let Some(v) = c.attr("rpy") {
                    origin_rpy = parse_floats::<3>(c, "rpy", v)?;
                }
            }
            "axis" => {
                c.check_attrs(&["xyz"])?;
                let v = parse_floats::<3>(c, "xyz", c.require_attr("xyz")?)?;
                if axis.replace(Vector3::new(v[0], v[1], v[2])).is_some() {
                    return Err(syntax(c.line, c.col, "duplicate <axis>"));
                }
            }
            "limit" => {
                c.check_attrs(&["lower", "upper"])?;
                let lower = parse_floats::<1>(c, "lower", c.require_attr("lower")?)?[0];
                let upper = parse_floats::<1>(c, "upper", c.require_attr("upper")?)?[0];
                if limits.replace((lower, upper)).is_some() {
                    return Err(syntax(c.line, c.col, "duplicate <limit>"));
                }
            }
            other => {
                return Err(syntax(c.line, c.col, format!("unsupported element <{other}> inside <joint>")));
            }
        }
    }

    let parent = parent.ok_or_else(|| syntax(el.line, el.col, format!("joint `{name}` is missing <parent>")))?;
    let child = child.ok_or_else(|| syntax(el.line, el.col, format!("joint `{name}` is missing <child>")))?;
    Ok(JointSpec { name, kind, parent, child, origin_xyz, origin_rpy, axis, limits })
}

// ---------------------------------------------------------------------------
// Serialization.

/// Writes the model back as text plus one OBJ document per meshed link.
/// Parsing the pair through [`MapSource`] reproduces the model field for
/// field, because floats are printed with the shortest round-trip form and
/// joint origins keep their authored xyz/rpy values.
pub fn serialize_robot_model(model: &RobotModel) -> (String, BTreeMap<String, String>) {
    let mut out = String::new();
    let mut meshes = BTreeMap::new();
    writeln!(out, "<robot name=\"{}\">", model.name).unwrap();
    for link in model.links() {
        if link.mesh.is_empty() {
            writeln!(out, "  <link name=\"{}\"/>", link.name).unwrap();
        } else {
            let file = format!("{}.obj", link.name);
            writeln!(out, "  <link name=\"{}\">", link.name).unwrap();
            writeln!(out, "    <mesh file=\"{file}\"/>").unwrap();
            writeln!(out, "  </link>").unwrap();
            meshes.insert(file, write_obj(&link.mesh));
        }
    }
    for j in model.joints() {
        writeln!(out, "  <joint name=\"{}\" type=\"{}\">", j.name, j.kind.label()).unwrap();
        writeln!(out, "    <parent link=\"{}\"/>", j.parent).unwrap();
        writeln!(out, "    <child link=\"{}\"/>", j.child).unwrap();
        writeln!(
            out,
            "    <origin xyz=\"{} {} {}\" rpy=\"{} {} {}\"/>",
            j.origin_xyz[0], j.origin_xyz[1], j.origin_xyz[2], j.origin_rpy[0], j.origin_rpy[1], j.origin_rpy[2]
        )
        .unwrap();
        if let Some(a) = j.axis {
            writeln!(out, "    <axis xyz=\"{} {} {}\"/>", a.x, a.y, a.z).unwrap();
        }
        if let Some((lo, hi)) = j.limits {
            writeln!(out, "    <limit lower=\"{lo}\" upper=\"{hi}\"/>").unwrap();
        }
        writeln!(out, "  </joint>").unwrap();
    }
    writeln!(out, "</robot>").unwrap();
    (out, meshes)
}

//! ASAP polygon annotations and the diagnosis label table.
//!
//! Regions are parsed from ASAP XML
//! (`ASAP_Annotations/Annotations/Annotation/Coordinates/Coordinate`), mapped to
//! label ids through a [`LabelTable`], and validated. Bad geometry is reported in
//! [`ParsedAnnotations::rejected`] instead of aborting the slide; an unknown group
//! name is a hard error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vertex in slide pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned bounds, `min` inclusive and `max` exclusive in pixel terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// A validated polygon annotation with its lesion label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedRegion {
    pub region_id: String,
    pub label_id: u32,
    pub vertices: Vec<Point>,
    pub slide_id: String,
}

impl AnnotatedRegion {
    /// Builds a region, enforcing the geometry invariants (≥ 3 finite,
    /// non-negative vertices enclosing a positive area).
    pub fn new(
        region_id: impl Into<String>,
        label_id: u32,
        vertices: Vec<Point>,
        slide_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(reason) = geometry_problem(&vertices) {
            return Err(Error::Geometry(reason));
        }
        Ok(Self {
            region_id: region_id.into(),
            label_id,
            vertices,
            slide_id: slide_id.into(),
        })
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn contains(&self, p: Point) -> bool {
        contains(self, p)
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut bb = BoundingBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for v in &self.vertices {
            bb.min_x = bb.min_x.min(v.x);
            bb.min_y = bb.min_y.min(v.y);
            bb.max_x = bb.max_x.max(v.x);
            bb.max_y = bb.max_y.max(v.y);
        }
        bb
    }
}

fn geometry_problem(vertices: &[Point]) -> Option<String> {
    if vertices.len() < 3 {
        return Some(format!("polygon has {} vertices, need at least 3", vertices.len()));
    }
    if let Some((i, _)) = vertices
        .iter()
        .enumerate()
        .find(|(_, v)| !v.x.is_finite() || !v.y.is_finite() || v.x < 0.0 || v.y < 0.0)
    {
        return Some(format!("vertex {i} is negative or non-finite"));
    }
    if shoelace(vertices).abs() <= 0.0 {
        return Some("degenerate polygon with zero area".to_string());
    }
    None
}

fn shoelace(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    let mut twice = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    twice / 2.0
}

/// Absolute shoelace area in pixels².
pub fn polygon_area(region: &AnnotatedRegion) -> f64 {
    shoelace(&region.vertices).abs()
}

/// Even-odd containment; points on the boundary count as inside.
pub fn contains(region: &AnnotatedRegion, p: Point) -> bool {
    let vs = &region.vertices;
    let n = vs.len();
    if (0..n).any(|i| on_segment(vs[i], vs[(i + 1) % n], p)) {
        return true;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vs[i], vs[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let scale = (b.x - a.x).abs().max((b.y - a.y).abs()).max(1.0);
    if cross.abs() > 1e-9 * scale {
        return false;
    }
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Number of pixels in the window `[x0, x0+w) × [y0, y0+h)` whose centers fall
/// inside the polygon under the even-odd rule (scanline fill).
pub fn inside_pixel_count(region: &AnnotatedRegion, x0: i64, y0: i64, w: u32, h: u32) -> u64 {
    let vs = &region.vertices;
    let n = vs.len();
    let x_end = x0 + w as i64; // exclusive
    let mut total = 0u64;
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for row in y0..y0 + h as i64 {
        let yc = row as f64 + 0.5;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (vs[i], vs[j]);
            if (a.y > yc) != (b.y > yc) {
                xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
            j = i;
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // pixel px is inside when span[0] < px + 0.5 < span[1]
            let first = ((span[0] - 0.5).floor() as i64 + 1).max(x0);
            let last = ((span[1] - 0.5).ceil() as i64 - 1).min(x_end - 1);
            if last >= first {
                total += (last - first + 1) as u64;
            }
        }
    }
    total
}

/// Diagnosis names keyed by label id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct LabelTable {
    entries: BTreeMap<u32, String>,
}

/// The 35 primary breast-tumour diagnoses of the WHO classification, ids 0..=34.
const REFERENCE_LABELS: [&str; 35] = [
    "Acinic Cell Carcinoma",
    "Adenoid Cystic Carcinoma",
    "Adenomyoepithelioma",
    "Apocrine Adenosis and Adenoma",
    "Atypical Ductal Hyperplasia",
    "Atypical Lobular Hyperplasia",
    "Carcinoma with Apocrine Differentiation",
    "Columnar Cell Lesions, Including Flat Epithelial Atypia",
    "Cribriform Carcinoma",
    "Ductal Adenoma",
    "Ductal Carcinoma in Situ",
    "Encapsulated Papillary Carcinoma",
    "Intraductal Papilloma",
    "Invasive Breast Carcinoma of No Special Type",
    "Invasive Lobular Carcinoma",
    "Invasive micropapillary Carcinoma",
    "Invasive Papillary Carcinoma",
    "Lactating Adenoma",
    "Lobular Carcinoma in Situ",
    "Malignant Adenomyoepithelioma",
    "Metaplastic Carcinoma",
    "Microglandular Adenosis",
    "Microinvasive Carcinoma",
    "Mucinous Carcinoma",
    "Mucinous Cystadenocarcinoma",
    "Neuroendocrine Carcinoma",
    "Neuroendocrine Tumor",
    "Papillary Ductal Carcinoma in Situ",
    "Pleomorphic Adenoma",
    "Radial Scar / Complex Sclerosing Lesion",
    "Sclerosing Adenosis",
    "Secretory Carcinoma",
    "Solid Papillary Carcinoma (in Situ and Invasive)",
    "Tubular Adenoma",
    "Tubular Carcinoma",
];

fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl LabelTable {
    /// Builds a table; ids must be unique (guaranteed by the map), contiguous, and
    /// names must stay distinct after case/whitespace normalization.
    pub fn new(entries: BTreeMap<u32, String>) -> Result<Self> {
        if let (Some(&lo), Some(&hi)) = (entries.keys().next(), entries.keys().next_back()) {
            if (hi - lo) as usize + 1 != entries.len() {
                return Err(Error::LabelTable(format!(
                    "ids must be contiguous, got {} ids spanning {lo}..={hi}",
                    entries.len()
                )));
            }
        }
        let mut seen = BTreeMap::new();
        for (id, name) in &entries {
            if let Some(prev) = seen.insert(normalize_name(name), *id) {
                return Err(Error::LabelTable(format!(
                    "labels {prev} and {id} share the name {name:?}"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// The 35-class breast tumour taxonomy.
    pub fn reference() -> Self {
        Self {
            entries: REFERENCE_LABELS
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32, n.to_string()))
                .collect(),
        }
    }

    /// Synthetic table `first..first+count` named `class_<id>`.
    pub fn synthetic(first: u32, count: u32) -> Self {
        Self {
            entries: (first..first + count)
                .map(|i| (i, format!("class_{i}")))
                .collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::LabelTable(e.to_string()))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("label table serializes")
    }

    pub fn contains_id(&self, id: u32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }

    /// Case-insensitive, whitespace-normalized name lookup.
    pub fn lookup(&self, name: &str) -> Option<u32> {
        let key = normalize_name(name);
        self.entries
            .iter()
            .find(|(_, n)| normalize_name(n) == key)
            .map(|(id, _)| *id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.entries.iter().map(|(id, n)| (*id, n.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TryFrom<BTreeMap<String, String>> for LabelTable {
    type Error = Error;

    fn try_from(raw: BTreeMap<String, String>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let id: u32 = k
                .trim()
                .parse()
                .map_err(|_| Error::LabelTable(format!("label id {k:?} is not a non-negative integer")))?;
            if entries.insert(id, v).is_some() {
                return Err(Error::LabelTable(format!("duplicate label id {id}")));
            }
        }
        Self::new(entries)
    }
}

impl From<LabelTable> for BTreeMap<String, String> {
    fn from(t: LabelTable) -> Self {
        // zero-padded keys keep numeric order in the serialized object
        t.entries
            .into_iter()
            .map(|(id, n)| (format!("{id:02}"), n))
            .collect()
    }
}

/// A polygon that was dropped during parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRegion {
    pub name: String,
    pub group: String,
    pub line: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub regions: Vec<AnnotatedRegion>,
    pub rejected: Vec<RejectedRegion>,
}

fn parse_coord(raw: &str) -> Option<f64> {
    // some ASAP locales write a decimal comma
    raw.trim().replace(',', ".").parse::<f64>().ok()
}

/// Parses ASAP annotation XML into validated regions.
///
/// Each `Polygon` annotation becomes one region, vertices ordered by the
/// `Order` attribute. Non-polygon annotations and invalid geometry are listed
/// in `rejected`.
pub fn parse_annotations(
    xml_bytes: &[u8],
    label_table: &LabelTable,
    slide_id: &str,
) -> Result<ParsedAnnotations> {
    let text = std::str::from_utf8(xml_bytes)
        .map_err(|e| Error::Xml(format!("input is not UTF-8: {e}")))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Xml(e.to_string()))?;
    let line_of = |node: roxmltree::Node| doc.text_pos_at(node.range().start).row;

    let root = doc.root_element();
    if root.tag_name().name() != "ASAP_Annotations" {
        return Err(Error::Xml(format!(
            "line {}: expected <ASAP_Annotations> root, found <{}>",
            line_of(root),
            root.tag_name().name()
        )));
    }

    let mut out = ParsedAnnotations::default();
    let annotations = root
        .children()
        .filter(|n| n.has_tag_name("Annotations"))
        .flat_map(|n| n.children().filter(|c| c.has_tag_name("Annotation")));

    for (index, ann) in annotations.enumerate() {
        let line = line_of(ann);
        let name = ann
            .attribute("Name")
            .map(str::to_string)
            .unwrap_or_else(|| format!("Annotation {index}"));
        let group = ann.attribute("PartOfGroup").unwrap_or("").to_string();
        let reject = |reason: String| RejectedRegion {
            name: name.clone(),
            group: group.clone(),
            line,
            reason,
        };

        let kind = ann.attribute("Type").unwrap_or("Polygon");
        if !kind.eq_ignore_ascii_case("polygon") {
            out.rejected
                .push(reject(format!("unsupported annotation type {kind:?}")));
            continue;
        }

        let label_id = label_table.lookup(&group).ok_or_else(|| Error::UnknownLabel {
            name: group.clone(),
            known: label_table.iter().map(|(_, n)| n.to_string()).collect(),
        })?;

        let mut coords: Vec<(f64, usize, Point)> = Vec::new();
        for (pos, c) in ann
            .children()
            .filter(|n| n.has_tag_name("Coordinates"))
            .flat_map(|n| n.children().filter(|c| c.has_tag_name("Coordinate")))
            .enumerate()
        {
            let attr = |key: &str| -> Result<f64> {
                let raw = c.attribute(key).ok_or_else(|| {
                    Error::Xml(format!(
                        "line {}: <Coordinate> in annotation {name:?} is missing attribute {key}",
                        line_of(c)
                    ))
                })?;
                parse_coord(raw).ok_or_else(|| {
                    Error::Xml(format!(
                        "line {}: <Coordinate> attribute {key}={raw:?} is not a number",
                        line_of(c)
                    ))
                })
            };
            let order = match c.attribute("Order") {
                Some(_) => attr("Order")?,
                None => pos as f64,
            };
            coords.push((order, pos, Point::new(attr("X")?, attr("Y")?)));
        }
        coords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let vertices: Vec<Point> = coords.into_iter().map(|(_, _, p)| p).collect();

        match geometry_problem(&vertices) {
            Some(reason) => out.rejected.push(reject(reason)),
            None => out.regions.push(AnnotatedRegion {
                region_id: name,
                label_id,
                vertices,
                slide_id: slide_id.to_string(),
            }),
        }
    }
    Ok(out)
}

fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Writes regions back out as ASAP XML. Group names come from `label_table`.
pub fn serialize_annotations(regions: &[AnnotatedRegion], label_table: &LabelTable) -> String {
    let mut xml = String::from("<?xml version=\"1.0\"?>\n<ASAP_Annotations>\n\t<Annotations>\n");
    for r in regions {
        let group = label_table
            .name(r.label_id)
            .map(str::to_string)
            .unwrap_or_else(|| r.label_id.to_string());
        let _ = writeln!(
            xml,
            "\t\t<Annotation Name=\"{}\" Type=\"Polygon\" PartOfGroup=\"{}\" Color=\"#F4FA58\">",
            escape_attr(&r.region_id),
            escape_attr(&group)
        );
        xml.push_str("\t\t\t<Coordinates>\n");
        for (i, v) in r.vertices.iter().enumerate() {
            let _ = writeln!(
                xml,
                "\t\t\t\t<Coordinate Order=\"{i}\" X=\"{}\" Y=\"{}\" />",
                v.x, v.y
            );
        }
        xml.push_str("\t\t\t</Coordinates>\n\t\t</Annotation>\n");
    }
    xml.push_str("\t</Annotations>\n\t<AnnotationGroups />\n</ASAP_Annotations>\n");
    xml
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> AnnotatedRegion {
        AnnotatedRegion::new(
            "sq",
            0,
            vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            "s",
        )
        .unwrap()
    }

    fn xml_with(annotations: &str) -> String {
        format!(
            "<?xml version=\"1.0\"?>\n<ASAP_Annotations>\n<Annotations>\n{annotations}</Annotations>\n</ASAP_Annotations>\n"
        )
    }

    fn polygon(name: &str, group: &str, pts: &[(f64, f64)]) -> String {
        let mut s = format!("<Annotation Name=\"{name}\" Type=\"Polygon\" PartOfGroup=\"{group}\"><Coordinates>\n");
        for (i, (x, y)) in pts.iter().enumerate() {
            s.push_str(&format!("<Coordinate Order=\"{i}\" X=\"{x}\" Y=\"{y}\" />\n"));
        }
        s.push_str("</Coordinates></Annotation>\n");
        s
    }

    #[test]
    fn triangle_maps_group_and_area() {
        let xml = xml_with(&polygon(
            "A1",
            "Intraductal Papilloma",
            &[(0.0, 0.0), (100.0, 0.0), (0.0, 100.0)],
        ));
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        assert_eq!(parsed.regions.len(), 1);
        assert!(parsed.rejected.is_empty());
        let r = &parsed.regions[0];
        assert_eq!(r.label_id, 12);
        assert_eq!(r.slide_id, "wsi");
        // shoelace: |0*0-100*0 + 100*100-0*0 + 0*0-0*100| / 2
        assert_eq!(r.area(), 5000.0);
    }

    #[test]
    fn two_vertex_polygon_is_rejected_not_fatal() {
        let xml = xml_with(&format!(
            "{}{}",
            polygon("bad", "Intraductal Papilloma", &[(0.0, 0.0), (5.0, 5.0)]),
            polygon("good", "intraductal   PAPILLOMA", &[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]),
        ));
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        assert_eq!(parsed.regions.len(), 1);
        assert_eq!(parsed.rejected.len(), 1);
        assert_eq!(parsed.rejected[0].name, "bad");
    }

    #[test]
    fn only_bad_polygon_gives_zero_regions() {
        let xml = xml_with(&polygon("bad", "Intraductal Papilloma", &[(0.0, 0.0), (5.0, 5.0)]));
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        assert!(parsed.regions.is_empty());
        assert_eq!(parsed.rejected.len(), 1);
    }

    #[test]
    fn empty_annotations_element() {
        let xml = "<ASAP_Annotations><Annotations /></ASAP_Annotations>";
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        assert!(parsed.regions.is_empty());
        assert!(parsed.rejected.is_empty());
    }

    #[test]
    fn malformed_xml_reports_position() {
        let xml = "<ASAP_Annotations>\n<Annotations>\n<Annotation Name=\"x\">\n</Annotations>";
        let err = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Xml(_)));
        assert!(msg.contains(":4:") || msg.contains("4:"), "{msg}");
    }

    #[test]
    fn missing_attribute_names_line() {
        let xml = "<ASAP_Annotations>\n<Annotations>\n<Annotation Name=\"x\" PartOfGroup=\"Ductal Adenoma\"><Coordinates>\n<Coordinate Order=\"0\" X=\"1\" />\n</Coordinates></Annotation></Annotations></ASAP_Annotations>";
        let msg = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 4") && msg.contains('Y'), "{msg}");
    }

    #[test]
    fn unknown_group_lists_known_labels() {
        let xml = xml_with(&polygon("x", "Nonexistent", &[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]));
        let err = parse_annotations(xml.as_bytes(), &LabelTable::synthetic(0, 2), "wsi").unwrap_err();
        match err {
            Error::UnknownLabel { name, known } => {
                assert_eq!(name, "Nonexistent");
                assert_eq!(known, vec!["class_0", "class_1"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn order_attribute_sorts_vertices() {
        let xml = xml_with(
            "<Annotation Name=\"o\" Type=\"Polygon\" PartOfGroup=\"Ductal Adenoma\"><Coordinates>\
             <Coordinate Order=\"2\" X=\"0\" Y=\"4\" />\
             <Coordinate Order=\"0\" X=\"0\" Y=\"0\" />\
             <Coordinate Order=\"1\" X=\"4,5\" Y=\"0\" />\
             </Coordinates></Annotation>",
        );
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        let v = &parsed.regions[0].vertices;
        assert_eq!(v[0], Point::new(0.0, 0.0));
        assert_eq!(v[1], Point::new(4.5, 0.0));
        assert_eq!(v[2], Point::new(0.0, 4.0));
    }

    #[test]
    fn non_polygon_types_are_reported() {
        let xml = xml_with(
            "<Annotation Name=\"d\" Type=\"Dot\" PartOfGroup=\"Ductal Adenoma\"><Coordinates>\
             <Coordinate Order=\"0\" X=\"3\" Y=\"4\" /></Coordinates></Annotation>",
        );
        let parsed = parse_annotations(xml.as_bytes(), &LabelTable::reference(), "wsi").unwrap();
        assert!(parsed.regions.is_empty());
        assert!(parsed.rejected[0].reason.contains("Dot"));
    }

    #[test]
    fn area_cases() {
        let sq = square();
        assert_eq!(polygon_area(&sq), 1.0);
        let mut rev = sq.clone();
        rev.vertices.reverse();
        assert_eq!(polygon_area(&rev), 1.0);
    }

    #[test]
    fn containment_cases() {
        let sq = square();
        assert!(contains(&sq, Point::new(0.5, 0.5)));
        assert!(!contains(&sq, Point::new(2.0, 2.0)));
        // boundary and corner count as inside
        assert!(contains(&sq, Point::new(1.0, 0.5)));
        assert!(contains(&sq, Point::new(0.0, 0.0)));
    }

    #[test]
    fn concave_notch_is_outside() {
        // L shape: 0..20 × 0..20 minus the 10..20 × 10..20 notch
        let l = AnnotatedRegion::new(
            "L",
            0,
            vec![
                Point::new(0.0, 0.0),
                Point::new(20.0, 0.0),
                Point::new(20.0, 10.0),
                Point::new(10.0, 10.0),
                Point::new(10.0, 20.0),
                Point::new(0.0, 20.0),
            ],
            "s",
        )
        .unwrap();
        assert!(!contains(&l, Point::new(15.0, 15.0)));
        assert!(contains(&l, Point::new(5.0, 15.0)));
        // 1 px raster: 300 of 400 pixel centers are inside
        let raster = (0..20)
            .flat_map(|y| (0..20).map(move |x| (x, y)))
            .filter(|&(x, y)| contains(&l, Point::new(x as f64 + 0.5, y as f64 + 0.5)))
            .count();
        assert_eq!(raster, 300);
        assert_eq!(inside_pixel_count(&l, 0, 0, 20, 20), 300);
        assert_eq!(inside_pixel_count(&l, 10, 10, 10, 10), 0);
    }

    #[test]
    fn region_constructor_rejects_bad_geometry() {
        let collinear = vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)];
        assert!(AnnotatedRegion::new("c", 0, collinear, "s").is_err());
        let negative = vec![Point::new(-1.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)];
        assert!(AnnotatedRegion::new("n", 0, negative, "s").is_err());
    }

    #[test]
    fn label_table_json_and_validation() {
        let t = LabelTable::from_json_str(r#"{"12": "Intraductal Papilloma", "11": "Encapsulated Papillary Carcinoma"}"#).unwrap();
        assert_eq!(t.lookup("  intraductal papilloma "), Some(12));
        assert_eq!(LabelTable::from_json_str(&t.to_json()).unwrap(), t);
        assert!(LabelTable::from_json_str(r#"{"0": "a", "2": "b"}"#).is_err());
        assert!(LabelTable::from_json_str(r#"{"0": "a", "1": "A"}"#).is_err());
        assert!(LabelTable::from_json_str(r#"{"x": "a"}"#).is_err());
        let reference = LabelTable::reference();
        assert_eq!(reference.len(), 35);
        assert_eq!(reference.lookup("Solid Papillary Carcinoma (in Situ and Invasive)"), Some(32));
    }
}

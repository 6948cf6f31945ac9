use super::DataError;

/// Strokes of one handwritten expression, in device units.
#[derive(Clone, Debug, PartialEq)]
pub struct InkSample {
    pub id: String,
    pub strokes: Vec<Vec<(f64, f64)>>,
    pub label: Option<String>,
}

fn byte_offset(text: &str, pos: roxmltree::TextPos) -> usize {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == pos.row as usize {
            let col = (pos.col as usize).saturating_sub(1);
            return offset + line.char_indices().nth(col).map(|(b, _)| b).unwrap_or(line.len());
        }
        offset += line.len();
    }
    offset
}

/// Parse an InkML document: `<trace>` elements hold comma-separated points
/// (`x y` plus optional extra channels); the label is the root-level
/// `<annotation type="truth">`. With `require_label` a missing label is an error.
pub fn parse_inkml(bytes: &[u8], require_label: bool) -> Result<InkSample, DataError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DataError::Xml {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| DataError::Xml {
        offset: byte_offset(text, e.pos()),
        message: e.to_string(),
    })?;
    let root = doc.root_element();
    let annotation = |kind: &str| {
        root.children()
            .filter(|n| n.has_tag_name("annotation") && n.attribute("type") == Some(kind))
            .find_map(|n| n.text())
            .map(|t| t.trim().to_string())
    };
    let label = annotation("truth");
    let id = annotation("UI").unwrap_or_default();

    let mut strokes = Vec::new();
    for (ti, trace) in root.descendants().filter(|n| n.has_tag_name("trace")).enumerate() {
        let body = trace.text().unwrap_or("");
        let mut points = Vec::new();
        for chunk in body.split(',') {
            let vals: Vec<&str> = chunk.split_whitespace().collect();
            if vals.is_empty() {
                continue;
            }
            if vals.len() < 2 {
                return Err(DataError::BadTrace { trace: ti, message: format!("point `{}` has one coordinate", chunk.trim()) });
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::BadTrace { trace: ti, message: format!("bad coordinate `{s}`") })
            };
            points.push((parse(vals[0])?, parse(vals[1])?));
        }
        if points.is_empty() {
            return Err(DataError::BadTrace { trace: ti, message: "no points".into() });
        }
        strokes.push(points);
    }
    if strokes.is_empty() {
        return Err(DataError::NoTraces);
    }
    if require_label && label.is_none() {
        return Err(DataError::MissingLabel { id });
    }
    Ok(InkSample { id, strokes, label })
}

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgePoint {
    pub point_id: String,
    pub standard_question: String,
    pub similar_questions: Vec<String>,
}

impl KnowledgePoint {
    /// Standard question first, then the similar ones in file order.
    pub fn questions(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.standard_question.as_str())
            .chain(self.similar_questions.iter().map(String::as_str))
    }

    pub fn num_questions(&self) -> usize {
        1 + self.similar_questions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub tenant_id: String,
    pub points: Vec<KnowledgePoint>,
}

fn clean_field(s: &str) -> bool {
    !s.trim().is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl KnowledgeBase {
    pub fn new(tenant_id: &str, points: Vec<KnowledgePoint>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &points {
            if !clean_field(&p.point_id) {
                return Err(Error::Usage(format!("invalid point id {:?}", p.point_id)));
            }
            if !seen.insert(p.point_id.as_str()) {
                return Err(Error::Usage(format!("duplicate point id {}", p.point_id)));
            }
            if let Some(q) = p.questions().find(|q| !clean_field(q)) {
                return Err(Error::Usage(format!(
                    "point {} has an invalid question {q:?}",
                    p.point_id
                )));
            }
        }
        Ok(Self {
            tenant_id: tenant_id.to_string(),
            points,
        })
    }

    /// Parses `point_id TAB standard TAB similar...` lines. Blank lines are
    /// skipped.
    pub fn parse(tenant_id: &str, text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            if fields.len() < 2 {
                return Err(err("expected point_id and a standard question".into()));
            }
            let point_id = fields[0].trim();
            if point_id.is_empty() {
                return Err(err("empty point id".into()));
            }
            if !seen.insert(point_id.to_string()) {
                return Err(err(format!("duplicate point id {point_id}")));
            }
            if fields[1..].iter().any(|q| q.trim().is_empty()) {
                return Err(err("empty question".into()));
            }
            points.push(KnowledgePoint {
                point_id: point_id.to_string(),
                standard_question: fields[1].trim().to_string(),
                similar_questions: fields[2..].iter().map(|q| q.trim().to_string()).collect(),
            });
        }
        Ok(Self {
            tenant_id: tenant_id.to_string(),
            points,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&p.point_id);
            for q in p.questions() {
                out.push('\t');
                out.push_str(q);
            }
            out.push('\n');
        }
        out
    }

    /// Reads a knowledge base; the tenant id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tenant = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("tenant");
        Self::parse(tenant, &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn num_questions(&self) -> usize {
        self.points.iter().map(KnowledgePoint::num_questions).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "p1\thow to pay\tpayment methods\tcan i pay by card\np2\topening hours\n";
        let kb = KnowledgeBase::parse("shop", text).unwrap();
        assert_eq!(kb.points.len(), 2);
        assert_eq!(kb.points[0].num_questions(), 3);
        assert_eq!(kb.to_text(), text);
        assert_eq!(kb.num_questions(), 4);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = KnowledgeBase::parse("t", "p1\tq\n\nbroken\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let dup = KnowledgeBase::parse("t", "p1\tq\np1\tr\n").unwrap_err();
        assert!(matches!(dup, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn constructor_validates() {
        let p = |id: &str| KnowledgePoint {
            point_id: id.into(),
            standard_question: "q".into(),
            similar_questions: vec![],
        };
        assert!(KnowledgeBase::new("t", vec![p("a"), p("a")]).is_err());
        assert!(KnowledgeBase::new("t", vec![p("a\tb")]).is_err());
        assert!(KnowledgeBase::new("t", vec![p("a"), p("b")]).is_ok());
    }
}

use super::{
    format_dimension, DamageClass, DefectSpec, Environment, Geometry, PositionTag, Severity,
};

/// Every word the caption grammar and the class-prompt template can emit.
pub const VOCABULARY: &[&str] = &[
    "a", "about", "meters", "long", "at", "the", "of", "road", ",", "conditions", "in",
    "diameter", "across", "with", "and", "photo", "on", "hairline", "moderate", "severe",
    "center", "edge", "shoulder", "centerline", "bright", "wet", "foggy", "dark",
    "longitudinal", "crack", "transverse", "alligator", "cracking", "pothole", "patch",
    "repair", "discoloration", "mixed", "damage", "irregular", "defect", "0.5", "1", "1.5",
    "2", "2.5", "3", "3.5", "4", "4.5", "5",
];

fn measure_clause(class: DamageClass, dim: &str) -> String {
    match class {
        DamageClass::Pothole => format!("about {dim} meters in diameter"),
        DamageClass::Alligator
        | DamageClass::PatchRepair
        | DamageClass::Discoloration
        | DamageClass::Mixed => format!("about {dim} meters across"),
        _ => format!("about {dim} meters long"),
    }
}

/// Deterministic template fill from the spec.
pub fn generate_caption(spec: &DefectSpec) -> String {
    let subject = match (&spec.class, &spec.geometry) {
        (DamageClass::Mixed, Geometry::Composite { parts }) if parts.len() == 2 => format!(
            "mixed damage with {} and {}",
            parts[0].class.name(),
            parts[1].class.name()
        ),
        (class, _) => class.name().to_string(),
    };
    format!(
        "a {} {} {} at the {} of the road, {} conditions",
        spec.severity.word(),
        subject,
        measure_clause(spec.class, &format_dimension(spec.length_m)),
        spec.position.word(),
        spec.environment.word()
    )
}

/// Attributes recovered from a caption produced by [`generate_caption`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCaption {
    pub class: DamageClass,
    pub components: Vec<DamageClass>,
    pub severity: Severity,
    pub position: PositionTag,
    pub environment: Environment,
    pub length_m: f64,
}

/// Inverse of [`generate_caption`] on the closed grammar.
pub fn parse_caption(caption: &str) -> Option<ParsedCaption> {
    let rest = caption.strip_prefix("a ")?;
    let (sev, rest) = rest.split_once(' ')?;
    let severity = Severity::from_word(sev)?;
    let (subject, rest) = rest.split_once(" about ")?;
    let (class, components) = if let Some(pair) = subject.strip_prefix("mixed damage with ") {
        let (a, b) = pair.split_once(" and ")?;
        (
            DamageClass::Mixed,
            vec![DamageClass::from_name(a)?, DamageClass::from_name(b)?],
        )
    } else {
        (DamageClass::from_name(subject)?, Vec::new())
    };
    let (dim, rest) = rest.split_once(" meters ")?;
    let length_m: f64 = dim.parse().ok()?;
    let expected = measure_clause(class, dim);
    let (measure_tail, rest) = rest.split_once(" at the ")?;
    if format!("about {dim} meters {measure_tail}") != expected {
        return None;
    }
    let (pos, rest) = rest.split_once(" of the road, ")?;
    let env = rest.strip_suffix(" conditions")?;
    Some(ParsedCaption {
        class,
        components,
        severity,
        position: PositionTag::from_word(pos)?,
        environment: Environment::from_word(env)?,
        length_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(class: DamageClass, env: Environment) -> DefectSpec {
        DefectSpec {
            class,
            geometry: Geometry::Polyline {
                points: vec![[10.0, 10.0], [10.0, 50.0]],
                width: 2.5,
            },
            severity: Severity::Moderate,
            position: PositionTag::Center,
            environment: env,
            length_m: 2.0,
        }
    }

    #[test]
    fn longitudinal_template() {
        let c = generate_caption(&spec(DamageClass::Longitudinal, Environment::Wet));
        assert_eq!(
            c,
            "a moderate longitudinal crack about 2 meters long at the center of the road, wet conditions"
        );
    }

    #[test]
    fn pothole_uses_diameter() {
        let mut s = spec(DamageClass::Pothole, Environment::Bright);
        s.length_m = 1.5;
        let c = generate_caption(&s);
        assert!(c.contains("pothole") && c.contains("diameter"), "{c}");
        assert!(!c.contains(" long "));
    }

    #[test]
    fn environment_changes_only_last_clause() {
        let a = generate_caption(&spec(DamageClass::Transverse, Environment::Foggy));
        let b = generate_caption(&spec(DamageClass::Transverse, Environment::Dark));
        let (pa, ea) = a.rsplit_once(", ").unwrap();
        let (pb, eb) = b.rsplit_once(", ").unwrap();
        assert_eq!(pa, pb);
        assert_ne!(ea, eb);
    }

    #[test]
    fn every_caption_word_is_in_vocabulary() {
        for &class in &DamageClass::ALL {
            for &env in Environment::ALL {
                let c = generate_caption(&spec(class, env)).replace(',', " , ");
                for w in c.split_whitespace() {
                    assert!(VOCABULARY.contains(&w), "{w} missing");
                }
            }
        }
        for w in "a photo of a on a road".split_whitespace() {
            assert!(VOCABULARY.contains(&w));
        }
    }

    #[test]
    fn parse_rejects_foreign_text() {
        assert!(parse_caption("a photo of a pothole on a road").is_none());
        assert!(parse_caption("").is_none());
    }
}

use std::path::PathBuf;

use temed_core::rextract::PromptTemplates;
use temed_core::ExtractionSchema;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn bundled_templates_match_their_schemas() {
    for name in ["heart", "patient_treatment", "hepatitis", "stroke", "psych_notes"] {
        let schema = ExtractionSchema::load(root().join(format!("schemas/{name}.schema.json"))).unwrap();
        let t = PromptTemplates::load_dir(root().join(format!("templates/{name}")), &schema)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let prompt = t.render(&schema, "REPORT BODY").unwrap();
        assert!(prompt.trim_end().ends_with("REPORT BODY"), "{name}");
    }
}

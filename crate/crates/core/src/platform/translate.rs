use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::{Capabilities, PlatformError};
use crate::workflow::{Binding, ElementKind, Paging, TaskTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FragmentKind {
    Display,
    Choice,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Fragment {
    pub kind: FragmentKind,
    pub element: ElementKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<Binding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub multiple: bool,
    pub required: bool,
    /// Text spans (or image regions) can be selected by the worker.
    pub selectable_spans: bool,
}

/// Eligibility hook the task page calls on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HookInfo {
    pub url: String,
    pub token: String,
}

/// Platform-neutral task payload handed to an adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskPayload {
    pub adapter_id: String,
    pub title: String,
    pub instructions: String,
    pub fragments: Vec<Fragment>,
    pub paging: Paging,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hook: Option<HookInfo>,
}

/// Maps every template element to a payload fragment. Elements the adapter
/// cannot render fail here, at deploy time.
pub fn translate_template(
    template: &TaskTemplate,
    adapter_id: &str,
    caps: &Capabilities,
    hook: Option<HookInfo>,
) -> Result<TaskPayload, PlatformError> {
    let mut fragments = Vec::with_capacity(template.elements.len());
    for el in &template.elements {
        if !caps.elements.contains(&el.kind) {
            return Err(PlatformError::UnsupportedElement {
                adapter: adapter_id.to_string(),
                element: el.kind.as_str().to_string(),
            });
        }
        let kind = match el.kind {
            ElementKind::Text | ElementKind::Image => FragmentKind::Display,
            ElementKind::SingleChoice | ElementKind::MultiChoice => FragmentKind::Choice,
            ElementKind::TextInput | ElementKind::HighlightableText | ElementKind::HighlightableImage => {
                FragmentKind::Input
            }
        };
        fragments.push(Fragment {
            kind,
            element: el.kind,
            binding: el.binding.clone(),
            options: el.options.clone(),
            multiple: el.kind == ElementKind::MultiChoice,
            required: el.required,
            selectable_spans: matches!(el.kind, ElementKind::HighlightableText | ElementKind::HighlightableImage),
        });
    }
    Ok(TaskPayload {
        adapter_id: adapter_id.to_string(),
        title: template.title.clone(),
        instructions: template.instructions.clone(),
        fragments,
        paging: template.paging,
        hook,
    })
}

fn mac(secret: &[u8], run_id: &str) -> Hmac<Sha256> {
    let mut m = Hmac::<Sha256>::new_from_slice(secret).expect("hmac accepts any key length");
    m.update(run_id.as_bytes());
    m
}

/// Per-run token embedded in task payloads; the eligibility endpoint only
/// answers callers presenting it.
pub fn hook_token(secret: &[u8], run_id: &str) -> String {
    hex::encode(mac(secret, run_id).finalize().into_bytes())
}

pub fn verify_hook_token(secret: &[u8], run_id: &str, token: &str) -> bool {
    match hex::decode(token) {
        Ok(bytes) => mac(secret, run_id).verify_slice(&bytes).is_ok(),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::UiElement;

    fn template(elements: Vec<UiElement>) -> TaskTemplate {
        TaskTemplate {
            title: "t".into(),
            instructions: String::new(),
            elements,
            paging: Paging {
                units_per_page: 4,
                gold_per_page: 1,
                first_page_all_gold: true,
                max_pages: 6,
            },
        }
    }

    #[test]
    fn text_and_choice() {
        let t = template(vec![UiElement::text("abstract"), UiElement::single_choice(&["in", "out"])]);
        let p = translate_template(&t, "sim", &Capabilities::all(true), None).unwrap();
        let kinds: Vec<_> = p.fragments.iter().map(|f| f.kind).collect();
        assert_eq!(kinds, vec![FragmentKind::Display, FragmentKind::Choice]);
        assert_eq!(p.fragments[1].options.len(), 2);
    }

    #[test]
    fn highlightable_text_is_selectable() {
        let mut el = UiElement::text("abstract");
        el.kind = ElementKind::HighlightableText;
        let p = translate_template(&template(vec![el]), "sim", &Capabilities::all(true), None).unwrap();
        assert!(p.fragments[0].selectable_spans);
    }

    #[test]
    fn unsupported_element_named() {
        let mut caps = Capabilities::all(false);
        caps.elements.remove(&ElementKind::HighlightableImage);
        let mut el = UiElement::text("img");
        el.kind = ElementKind::HighlightableImage;
        let err = translate_template(&template(vec![el]), "file", &caps, None).unwrap_err();
        assert!(err.to_string().contains("highlightable-image"), "{err}");
    }

    #[test]
    fn hook_tokens_verify_per_run() {
        let t = hook_token(b"secret", "run-1");
        assert!(verify_hook_token(b"secret", "run-1", &t));
        assert!(!verify_hook_token(b"secret", "run-2", &t));
        assert!(!verify_hook_token(b"other", "run-1", &t));
        assert!(!verify_hook_token(b"secret", "run-1", "zz"));
    }
}

//! Prompt grammar and the rule-based paraphraser.

use std::collections::HashSet;

use super::{Finding, Modality, Origin, PromptRecord, SceneAttributes};
use crate::error::{config_err, Result};
use crate::rng::{derive_seed, Stream};

const LEADS: [&str; 3] = ["", "please ", "kindly "];
const VERBS: [&str; 8] = ["generate", "create", "produce", "render", "make", "synthesize", "draw", "show"];
const NOUNS: [&str; 6] = ["image", "picture", "photo", "frame", "view", "snapshot"];
const CONNECTORS: [&str; 6] = ["containing", "showing", "with", "depicting", "featuring", "that shows"];
const SEEN: [&str; 4] = ["seen", "shown", "visible", "captured"];
const HUE_PATTERNS: [&str; 4] = [" with {} tones", " in {} hues", " under {} lighting", " tinted {}"];
const HUE_WORDS: [[&str; 3]; 6] = [
    ["pink", "rose", "pinkish"],
    ["red", "crimson", "reddish"],
    ["orange", "amber", "orangish"],
    ["green", "emerald", "greenish"],
    ["blue", "azure", "bluish"],
    ["violet", "purple", "purplish"],
];
const ORDERS: usize = 4;

fn objects(a: &SceneAttributes) -> &'static [&'static str] {
    match (a.finding, a.count) {
        (Finding::Clean, _) => &["no abnormalities", "no findings", "healthy tissue", "a clean mucosa"],
        (Finding::Polyp, 1) => &["a polyp", "one polyp", "a single polyp", "a colon polyp"],
        (Finding::Polyp, 2) => &["two polyps", "2 polyps", "a pair of polyps"],
        (Finding::Polyp, _) => &["three polyps", "3 polyps", "three separate polyps"],
        (Finding::Instrument, 1) => &["biopsy forceps", "a biopsy forceps", "a surgical instrument", "one instrument"],
        (Finding::Instrument, 2) => &["two biopsy forceps", "two instruments", "a pair of instruments"],
        (Finding::Instrument, _) => &["three biopsy forceps", "three instruments", "3 instruments"],
    }
}

fn modality_words(m: Modality) -> [&'static str; 3] {
    match m {
        Modality::Endo => ["endoscopic", "colonoscopy", "endoscopy"],
        Modality::Xray => ["x-ray", "radiographic", "xray"],
    }
}

/// Which attributes a phrasing mentions besides the finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slots {
    pub modality: bool,
    pub hue: bool,
}

/// One point in the phrasing space; every field indexes a word table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Style {
    order: usize,
    lead: usize,
    verb: usize,
    noun: usize,
    conn: usize,
    object: usize,
    modality: usize,
    hue_word: usize,
    hue_pattern: usize,
}

const fn tpl(order: usize, verb: usize, noun: usize, conn: usize, hue_pattern: usize, modality: bool, hue: bool) -> (Style, Slots) {
    (
        Style { order, lead: 0, verb, noun, conn, object: 0, modality: 0, hue_word: 0, hue_pattern },
        Slots { modality, hue },
    )
}

/// The original-prompt templates. Template 0 is the plain "generate an image containing …" form.
const TEMPLATES: [(Style, Slots); 16] = [
    tpl(0, 0, 0, 0, 0, false, false),
    tpl(0, 0, 0, 0, 0, true, false),
    tpl(0, 1, 1, 1, 0, true, false),
    tpl(1, 2, 2, 0, 0, true, false),
    tpl(0, 0, 0, 0, 0, false, true),
    tpl(2, 0, 0, 2, 1, false, true),
    tpl(0, 0, 0, 0, 0, true, true),
    tpl(0, 1, 1, 1, 1, true, true),
    tpl(0, 2, 2, 3, 2, true, true),
    tpl(1, 0, 0, 0, 3, true, true),
    tpl(1, 1, 1, 0, 0, true, true),
    tpl(2, 0, 0, 0, 1, true, true),
    tpl(2, 0, 1, 4, 2, true, true),
    tpl(3, 0, 0, 0, 0, true, true),
    tpl(3, 0, 2, 1, 3, true, true),
    tpl(0, 3, 3, 5, 1, true, true),
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

pub fn template_slots(template: usize) -> Result<Slots> {
    match TEMPLATES.get(template) {
        Some((_, s)) => Ok(*s),
        None => config_err(format!("unknown prompt template {template} (have {TEMPLATE_COUNT})")),
    }
}

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) || next.starts_with("x-") || next.starts_with("xray") {
        "an"
    } else {
        "a"
    }
}

fn render(a: &SceneAttributes, slots: Slots, s: &Style) -> String {
    let obj = objects(a)[s.object];
    let noun = NOUNS[s.noun];
    let described = if slots.modality { format!("{} {noun}", modality_words(a.modality)[s.modality]) } else { noun.to_string() };
    let np = format!("{} {described}", article(&described));
    let hue = if slots.hue {
        HUE_PATTERNS[s.hue_pattern].replace("{}", HUE_WORDS[a.hue as usize][s.hue_word])
    } else {
        String::new()
    };
    let lead = LEADS[s.lead];
    let verb = VERBS[s.verb];
    match s.order {
        0 => format!("{lead}{verb} {np} {} {obj}{hue}", CONNECTORS[s.conn]),
        1 => format!("{lead}{verb} {obj} in {np}{hue}"),
        2 => format!("{np} {} {obj}{hue}", CONNECTORS[s.conn]),
        _ => format!("{obj} {} in {np}{hue}", SEEN[s.conn % SEEN.len()]),
    }
}

pub fn original_id(a: &SceneAttributes, template: usize) -> String {
    format!("o-{}-t{template:02}", a.key())
}

/// Fill template `template` with the attribute words.
pub fn render_prompt(a: &SceneAttributes, template: usize) -> Result<PromptRecord> {
    a.validate()?;
    let slots = template_slots(template)?;
    let (style, _) = TEMPLATES[template];
    Ok(PromptRecord {
        id: original_id(a, template),
        text: render(a, slots, &style),
        attrs: *a,
        origin: Origin::Original,
        parent_id: None,
        template: Some(template),
    })
}

/// Number of distinct phrasing tuples available for a parent with these slots.
fn capacity(a: &SceneAttributes, slots: Slots) -> usize {
    let per_np = NOUNS.len() * if slots.modality { 3 } else { 1 };
    let hue = if slots.hue { 3 * HUE_PATTERNS.len() } else { 1 };
    let obj = objects(a).len();
    let verbal = LEADS.len() * VERBS.len() * (CONNECTORS.len() + 1);
    let nominal = CONNECTORS.len() + SEEN.len();
    (verbal + nominal) * per_np * hue * obj
}

fn random_style(r: &mut Stream, a: &SceneAttributes, slots: Slots) -> Style {
    Style {
        order: r.index(ORDERS),
        lead: r.index(LEADS.len()),
        verb: r.index(VERBS.len()),
        noun: r.index(NOUNS.len()),
        conn: r.index(CONNECTORS.len()),
        object: r.index(objects(a).len()),
        modality: if slots.modality { r.index(3) } else { 0 },
        hue_word: if slots.hue { r.index(3) } else { 0 },
        hue_pattern: if slots.hue { r.index(HUE_PATTERNS.len()) } else { 0 },
    }
}

/// `k` distinct rewrites of `prompt` via synonym substitution and clause
/// reordering. Attributes are preserved and every text differs from the
/// parent. Requests beyond the grammar's capacity are capped with a warning.
pub fn paraphrase(prompt: &PromptRecord, k: usize, seed: u64) -> Result<Vec<PromptRecord>> {
    if k == 0 {
        return config_err("paraphrase count must be at least 1");
    }
    let slots = match prompt.template {
        Some(t) => template_slots(t)?,
        None => Slots { modality: true, hue: true },
    };
    let cap = capacity(&prompt.attrs, slots).saturating_sub(1);
    let want = if k > cap {
        log::warn!("asked for {k} paraphrases of {:?}, grammar allows {cap}", prompt.text);
        cap
    } else {
        k
    };
    let mut r = Stream::new(derive_seed(seed, &prompt.id));
    let mut seen: HashSet<String> = HashSet::from([prompt.text.clone()]);
    let mut out = Vec::with_capacity(want);
    let mut attempts = 0;
    while out.len() < want && attempts < 200 * want + 1000 {
        attempts += 1;
        let text = render(&prompt.attrs, slots, &random_style(&mut r, &prompt.attrs, slots));
        if seen.insert(text.clone()) {
            out.push(PromptRecord {
                id: format!("{}-r{:02}", prompt.id, out.len()),
                text,
                attrs: prompt.attrs,
                origin: Origin::Paraphrase,
                parent_id: Some(prompt.id.clone()),
                template: prompt.template,
            });
        }
    }
    if out.len() < want {
        log::warn!("found only {} of {want} distinct paraphrases of {:?}", out.len(), prompt.text);
    }
    Ok(out)
}

//! Emotion prompt compilation from an admitted cue bank.
//!
//! Two modes produce the final textual condition. The template mode is
//! fully deterministic: cues attach to the object on their source path
//! when that object is present in the scene, everything else becomes a
//! scene-level clause, and the result is assembled in a fixed clause
//! order. The language-model mode renders the rewrite instruction and
//! delegates to a client, then validates the response against the same
//! invariants: the target emotion is never named and no new structural
//! entities appear.

use serde::{Deserialize, Serialize};

use super::{tokens, CueBank, CueCandidate, CueError, SceneStructure};
use crate::clients::ClientError;
use crate::kg::EmotionLabels;

/// Rough visual category of a cue, used to pick the clause shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueType {
    Color,
    Material,
    Shape,
    Lighting,
    Posture,
    CameraView,
}

const COLOR_WORDS: &[&str] = &[
    "golden", "red", "crimson", "scarlet", "blue", "azure", "green", "emerald", "yellow", "amber",
    "purple", "violet", "orange", "pink", "sepia", "gray", "grey", "pale", "ashen", "black",
    "white", "brown", "teal",
];
const MATERIAL_WORDS: &[&str] = &[
    "rusty", "rusted", "corroded", "metallic", "metal", "wooden", "wood", "glass", "stone",
    "concrete", "fabric", "cloth", "fur", "furry", "leather", "plastic", "rotten", "mossy",
    "muddy", "dusty", "weathered", "cracked", "polished", "rough", "smooth", "velvet",
];
const SHAPE_WORDS: &[&str] = &[
    "twisted", "crooked", "jagged", "round", "rounded", "angular", "curved", "bent", "sharp",
    "slender", "bulky", "gnarled",
];
const LIGHTING_WORDS: &[&str] = &[
    "dim", "dimly", "bright", "shadowy", "dark", "sunlit", "moonlit", "backlit", "glowing",
    "radiant", "gloomy", "hazy", "foggy", "misty",
];
const POSTURE_WORDS: &[&str] = &[
    "snarling", "growling", "barking", "playful", "crouching", "leaping", "sitting", "standing",
    "running", "curled", "alert", "drooping", "slumped", "wagging", "frolicking",
];
const CAMERA_WORDS: &[&str] = &[
    "aerial", "closeup", "close", "wide", "overhead", "tilted", "panoramic",
];

/// Classify a cue by keyword, first matching table wins; anything
/// unrecognized reads as a surface quality.
pub fn classify_cue(text: &str) -> CueType {
    let toks = tokens(text);
    let tables: [(&[&str], CueType); 6] = [
        (COLOR_WORDS, CueType::Color),
        (MATERIAL_WORDS, CueType::Material),
        (SHAPE_WORDS, CueType::Shape),
        (LIGHTING_WORDS, CueType::Lighting),
        (POSTURE_WORDS, CueType::Posture),
        (CAMERA_WORDS, CueType::CameraView),
    ];
    for (words, ty) in tables {
        if toks.iter().any(|t| words.contains(&t.as_str())) {
            return ty;
        }
    }
    CueType::Material
}

/// Replacements applied to toxic nouns when the target emotion is positive.
const TOXIC_SUBSTITUTIONS: &[(&str, &str)] = &[
    ("trash", "gift box"),
    ("garbage", "wrapped package"),
    ("litter", "clean lidded bin"),
];

fn toxic_replacement(noun: &str) -> Option<&'static str> {
    let toks = tokens(noun);
    TOXIC_SUBSTITUTIONS
        .iter()
        .find(|(bad, _)| toks.iter().any(|t| t == bad))
        .map(|(_, good)| *good)
}

/// Replace toxic noun phrases inside free text, longest phrase first.
fn substitute_toxic_text(text: &str, nouns: &[(String, String)]) -> String {
    let mut out = text.to_string();
    let mut phrases: Vec<&(String, String)> = nouns.iter().collect();
    phrases.sort_by_key(|(from, _)| std::cmp::Reverse(from.len()));
    for (from, to) in phrases {
        out = out.replace(from.as_str(), to);
    }
    for (bad, good) in TOXIC_SUBSTITUTIONS {
        out = replace_word(&out, bad, good);
    }
    out
}

fn replace_word(text: &str, word: &str, with: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.to_lowercase().find(word) {
        let before_ok = pos == 0
            || !rest[..pos].chars().next_back().map_or(false, |c| c.is_alphanumeric());
        let after = &rest[pos + word.len()..];
        let after_ok = !after.chars().next().map_or(false, |c| c.is_alphanumeric());
        out.push_str(&rest[..pos]);
        if before_ok && after_ok {
            out.push_str(with);
        } else {
            out.push_str(&rest[pos..pos + word.len()]);
        }
        rest = after;
    }
    out.push_str(rest);
    out
}

fn article(phrase: &str) -> &'static str {
    match phrase.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a') | Some('e') | Some('i') | Some('o') | Some('u') => "an",
        _ => "a",
    }
}

/// The compiled condition text with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrompt {
    pub text: String,
    /// Admitted cue texts the prompt was built from, in bank order.
    pub evidence: Vec<String>,
    pub target_emotion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Template,
    Lmm,
}

impl Default for PromptMode {
    fn default() -> Self {
        PromptMode::Template
    }
}

/// A conditioned text completion backend.
pub trait LmmClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, ClientError>;
}

impl LmmClient for crate::clients::JsonLmm {
    fn complete(&self, system: &str, user: &str) -> Result<String, ClientError> {
        crate::clients::JsonLmm::complete(self, system, user)
    }
}

pub const REWRITE_SYSTEM_PROMPT: &str = "You are a visual scene enhancer that rewrites image descriptions to evoke a specific emotion using only observable details and atmospheric effects, without introducing new objects or altering the existing background structure.\n\nGiven:\n- A list of objects\n- An original description (o_prompt)\n- A target emotion (do NOT mention it in output)\n- A set of strong visual cues (color, texture, lighting, etc.)\n- Scene context for plausibility\n\nYour task (think step-by-step internally; do not reveal reasoning):\n- Step 1: Object enhancement. Add vivid, visible attributes from the cue bank for each object. Use at least two cue types across color, material, shape, lighting, posture (if animate), or camera view. Attach adjectives directly before nouns or use \"with\" phrases.\n- Step 2: Positive-emotion cleanup. If the emotion is positive and any object is toxic (trash/garbage/litter), replace it with a clean alternative (gift box/wrapped package/clean lidded bin) and apply cues.\n- Step 3: Global atmosphere only. Add global atmosphere and tone modifiers without adding any new entities. Allowed modifiers include lighting (e.g., dimly lit, rim-lit), color grading (e.g., sepia tint), weather feel (e.g., hazy air), and mood tone (e.g., eerie stillness).\n- Step 4: Optional subtle effects. If needed, add at most two subtle environmental effects. These effects must be small-scale and physically plausible, and must not imply their source.";

/// Fill the rewrite instruction shown to the language model.
pub fn render_user_prompt(bank: &CueBank, scene: &SceneStructure, target_emotion: &str) -> String {
    let objects = if scene.objects.is_empty() {
        "none".to_string()
    } else {
        scene
            .objects
            .iter()
            .map(|o| o.noun.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let attributes = if bank.admitted.is_empty() {
        "none".to_string()
    } else {
        bank.admitted
            .iter()
            .map(|c| c.text.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let scene_name = scene.scene.as_deref().unwrap_or("unspecified");
    format!(
        "Objects: {objects}\nOriginal prompt: \"{}\"\nTarget emotion (do not mention): {target_emotion}\nScene context: {scene_name}\nVisual cues: {attributes}\n\nInstruction: Rewrite the sentence using only attribute enhancements, global atmosphere, and optional minor effects. Do NOT add buildings, skies, walls, people, animals, vehicles, or any new structural background elements. Return only the final enhanced sentence.",
        scene.o_prompt
    )
}

const FORBIDDEN_NOUNS: &[&str] = &[
    "building", "buildings", "sky", "skies", "wall", "walls", "person", "people", "man", "woman",
    "child", "animal", "animals", "vehicle", "vehicles", "car", "cars",
];

fn scene_vocabulary(scene: &SceneStructure) -> Vec<String> {
    let mut vocab = tokens(&scene.o_prompt);
    if let Some(name) = &scene.scene {
        vocab.extend(tokens(name));
    }
    for obj in &scene.objects {
        vocab.extend(tokens(&obj.noun));
    }
    vocab
}

fn check_invariants(text: &str, target_emotion: &str, scene: &SceneStructure) -> Result<(), CueError> {
    if text.trim().is_empty() {
        return Err(CueError::InvariantViolation {
            reason: "empty response".to_string(),
        });
    }
    if text.to_lowercase().contains(&target_emotion.to_lowercase()) {
        return Err(CueError::InvariantViolation {
            reason: format!("prompt names the target emotion {target_emotion:?}"),
        });
    }
    let vocab = scene_vocabulary(scene);
    for tok in tokens(text) {
        if FORBIDDEN_NOUNS.contains(&tok.as_str()) && !vocab.contains(&tok) {
            return Err(CueError::InvariantViolation {
                reason: format!("new structural entity {tok:?}"),
            });
        }
    }
    Ok(())
}

fn base_description(scene: &SceneStructure) -> Option<String> {
    let trimmed = scene.o_prompt.trim().trim_end_matches('.').trim();
    if !trimmed.is_empty() {
        return Some(trimmed.to_string());
    }
    scene.scene.as_ref().map(|name| format!("a photo of {name}"))
}

fn compile_template(
    bank: &CueBank,
    scene: &SceneStructure,
    target_emotion: &str,
    labels: &EmotionLabels,
) -> Result<EmotionPrompt, CueError> {
    let positive = labels.is_positive(target_emotion);
    let base = base_description(scene);
    let evidence: Vec<String> = bank.admitted.iter().map(|c| c.text.clone()).collect();

    if bank.admitted.is_empty() {
        let base = base.ok_or(CueError::EmptyEvidence)?;
        let base = if positive {
            substitute_toxic_text(&base, &noun_substitutions(scene))
        } else {
            base
        };
        let atmosphere = if positive {
            "with a warm, uplifting atmosphere"
        } else {
            "with a heavy, unsettling atmosphere"
        };
        let text = format!("{base}, {atmosphere}.");
        check_invariants(&text, target_emotion, scene)?;
        return Ok(EmotionPrompt {
            text,
            evidence,
            target_emotion: target_emotion.to_string(),
        });
    }

    let base = base.unwrap_or_else(|| "a photo".to_string());
    let subs = noun_substitutions(scene);
    let base = if positive {
        substitute_toxic_text(&base, &subs)
    } else {
        base
    };

    // Attach object-quality cues to their source object, keep the rest
    // as scene-level clauses.
    let mut per_object: Vec<(String, Vec<&CueCandidate>)> = scene
        .objects
        .iter()
        .map(|o| (o.id.clone(), Vec::new()))
        .collect();
    let mut lighting = Vec::new();
    let mut tones = Vec::new();
    let mut camera = Vec::new();
    let mut atmosphere = Vec::new();
    for cue in &bank.admitted {
        let ty = classify_cue(&cue.text);
        let attached = super::attachment_object(cue, scene);
        match (ty, attached) {
            (CueType::Lighting, _) => lighting.push(cue.text.clone()),
            (CueType::CameraView, _) => camera.push(cue.text.clone()),
            (CueType::Color | CueType::Material | CueType::Shape | CueType::Posture, Some(obj)) => {
                per_object
                    .iter_mut()
                    .find(|(id, _)| id == &obj.id)
                    .expect("attachment object is in scene")
                    .1
                    .push(cue);
            }
            (CueType::Color, None) => tones.push(cue.text.clone()),
            (_, None) => atmosphere.push(cue.text.clone()),
        }
    }

    let mut object_phrases = Vec::new();
    for obj in &scene.objects {
        let cues = &per_object.iter().find(|(id, _)| id == &obj.id).unwrap().1;
        if cues.is_empty() {
            continue;
        }
        let noun = if positive {
            match toxic_replacement(&obj.noun) {
                Some(sub) => sub.to_string(),
                None => obj.noun.clone(),
            }
        } else {
            obj.noun.clone()
        };
        let adjectives: Vec<&str> = cues.iter().take(2).map(|c| c.text.as_str()).collect();
        let extras: Vec<&str> = cues.iter().skip(2).map(|c| c.text.as_str()).collect();
        let head = format!("{} {}", adjectives.join(" "), noun);
        let mut phrase = format!("{} {}", article(&head), head);
        if !extras.is_empty() {
            phrase.push_str(&format!(" with {} accents", extras.join(" and ")));
        }
        object_phrases.push(phrase);
    }

    let mut parts = vec![base];
    if !object_phrases.is_empty() {
        parts.push(format!("featuring {}", object_phrases.join(" and ")));
    }
    for cue in &lighting {
        parts.push(format!("under {cue} light"));
    }
    for cue in &tones {
        parts.push(format!("washed in {cue} tones"));
    }
    for cue in &camera {
        parts.push(format!("framed in a {cue} view"));
    }
    for cue in atmosphere.iter().take(2) {
        parts.push(format!("wrapped in a {cue} atmosphere"));
    }
    let text = format!("{}.", parts.join(", "));
    check_invariants(&text, target_emotion, scene)?;
    Ok(EmotionPrompt {
        text,
        evidence,
        target_emotion: target_emotion.to_string(),
    })
}

fn noun_substitutions(scene: &SceneStructure) -> Vec<(String, String)> {
    scene
        .objects
        .iter()
        .filter_map(|o| toxic_replacement(&o.noun).map(|sub| (o.noun.clone(), sub.to_string())))
        .collect()
}

/// Compile the final emotion prompt from the admitted bank.
pub fn compile_prompt(
    bank: &CueBank,
    scene: &SceneStructure,
    target_emotion: &str,
    mode: PromptMode,
    labels: &EmotionLabels,
    client: Option<&dyn LmmClient>,
) -> Result<EmotionPrompt, CueError> {
    if !labels.contains(target_emotion) {
        return Err(CueError::UnknownEmotion {
            label: target_emotion.to_string(),
        });
    }
    match mode {
        PromptMode::Template => compile_template(bank, scene, target_emotion, labels),
        PromptMode::Lmm => {
            let client = client.ok_or_else(|| {
                CueError::Provider("language-model mode configured without a client".to_string())
            })?;
            let user = render_user_prompt(bank, scene, target_emotion);
            let response = client.complete(REWRITE_SYSTEM_PROMPT, &user)?;
            let text = response.trim().to_string();
            check_invariants(&text, target_emotion, scene)?;
            Ok(EmotionPrompt {
                text,
                evidence: bank.admitted.iter().map(|c| c.text.clone()).collect(),
                target_emotion: target_emotion.to_string(),
            })
        }
    }
}

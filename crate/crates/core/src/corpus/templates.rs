use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Question and answer templates for one attribute, with the closed list of
/// values it can take. Templates use `{name}` and `{value}` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTemplates {
    pub attribute: String,
    pub values: Vec<String>,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub attributes: Vec<AttributeTemplates>,
}

const SLOTS: [&str; 2] = ["name", "value"];

fn slots(template: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed slot in template {template:?}")))?;
        let slot = &after[..close];
        if !SLOTS.contains(&slot) {
            return Err(Error::Config(format!(
                "template {template:?} references unknown slot {{{slot}}}"
            )));
        }
        out.push(slot);
        rest = &after[close + 1..];
    }
    Ok(out)
}

/// Substitutes `{name}` and `{value}`; the template must already be valid.
pub(crate) fn fill(template: &str, name: &str, value: &str) -> String {
    template.replace("{name}", name).replace("{value}", value)
}

impl TemplateSet {
    pub fn validate(&self) -> Result<()> {
        if self.first_names.is_empty() || self.last_names.is_empty() {
            return Err(Error::Config("template set needs first and last names".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("template set has no attributes".into()));
        }
        for a in &self.attributes {
            if a.questions.is_empty() || a.questions.len() != a.answers.len() {
                return Err(Error::Config(format!(
                    "attribute {:?}: questions and answers must be non-empty and paired",
                    a.attribute
                )));
            }
            if a.values.len() < 2 {
                return Err(Error::Config(format!("attribute {:?} needs ≥ 2 values", a.attribute)));
            }
            for v in &a.values {
                if v.split_whitespace().count() != 1 {
                    return Err(Error::Config(format!("value {v:?} must be a single word")));
                }
            }
            for q in &a.questions {
                if !slots(q)?.contains(&"name") {
                    return Err(Error::Config(format!("question {q:?} lacks a {{name}} slot")));
                }
            }
            for ans in &a.answers {
                let s = slots(ans)?;
                if s.iter().filter(|&&x| x == "value").count() != 1 {
                    return Err(Error::Config(format!(
                        "answer {ans:?} must contain exactly one {{value}} slot"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The built-in set of fictitious-biography templates.
    pub fn builtin() -> Self {
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        TemplateSet {
            first_names: words(
                "alder brisa calvo dunya eskel farra gideo halvi ismen jorna kestra lumo \
                 marek nadia orvin pella quorin rasmi sefa tovin ulla varek wenna yaro \
                 zelda aster borin celis davor elin",
            ),
            last_names: words(
                "ashgrove brennick caldor dovetail emberly farrow glenholt harrow ivesson \
                 jadeport kerrow lindqvist marrowby norwell oakhurst pendry quillon ravensby \
                 stroud tamsin underhill valewood westmere yarrow zephyr abernach bellweather \
                 corvane delmont",
            ),
            attributes: vec![
                AttributeTemplates {
                    attribute: "birthplace".into(),
                    values: words(
                        "amberton briarwick coldmere dunhaven eastmarch fernvale greywater \
                         highcliff ironbridge juniper kingsreach lakemont millbrook northwold \
                         oldcastle pinecrest queensford redhollow silverlake thornbury \
                         umberfield violetmoor whitestone yellowfen zinnia ashby bramley \
                         crowfield dalesby elmstead foxley",
                    ),
                    questions: strings(&[
                        "where was {name} born ?",
                        "what is the birthplace of {name} ?",
                        "in which town did {name} grow up ?",
                    ]),
                    answers: strings(&[
                        "{name} was born in {value} .",
                        "the birthplace of {name} is {value} .",
                        "{name} grew up in the town of {value} .",
                    ]),
                },
                AttributeTemplates {
                    attribute: "occupation".into(),
                    values: words(
                        "architect baker cartographer dentist engineer florist geologist \
                         historian illustrator jeweler librarian mechanic navigator optician \
                         pharmacist quiltmaker reporter sculptor translator upholsterer \
                         veterinarian weaver zoologist astronomer blacksmith carpenter \
                         diplomat economist falconer glassblower",
                    ),
                    questions: strings(&[
                        "what does {name} do for a living ?",
                        "what is the occupation of {name} ?",
                        "which profession did {name} choose ?",
                    ]),
                    answers: strings(&[
                        "{name} works as a {value} .",
                        "the occupation of {name} is {value} .",
                        "{name} chose to become a {value} .",
                    ]),
                },
                AttributeTemplates {
                    attribute: "genre".into(),
                    values: words(
                        "mystery romance fantasy horror satire poetry thriller biography \
                         memoir folklore drama comedy adventure tragedy western noir \
                         fable parody epic allegory",
                    ),
                    questions: strings(&[
                        "what genre does {name} write ?",
                        "which genre is {name} known for ?",
                        "what kind of books does {name} publish ?",
                    ]),
                    answers: strings(&[
                        "{name} writes {value} books .",
                        "{name} is known for {value} .",
                        "the books of {name} are mostly {value} .",
                    ]),
                },
                AttributeTemplates {
                    attribute: "award".into(),
                    values: words(
                        "azurite beryl citrine diamond emerald feldspar garnet hematite \
                         iolite jasper kunzite larimar malachite nephrite onyx peridot \
                         quartz ruby sapphire topaz",
                    ),
                    questions: strings(&[
                        "which award did {name} win ?",
                        "what prize was given to {name} ?",
                        "which honor has {name} received ?",
                    ]),
                    answers: strings(&[
                        "{name} won the {value} award .",
                        "the prize given to {name} was the {value} medal .",
                        "{name} received the {value} honor .",
                    ]),
                },
            ],
        }
    }
}

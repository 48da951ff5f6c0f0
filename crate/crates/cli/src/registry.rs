//! Dataset registry: the built-in desk-scale toy set plus the five
//! ImageNet subsets (resolved only when a local image folder is supplied).

use anyhow::{bail, Context, Result};
use latentdd_core::toyset::{generate_toy, ToyConfig};
use latentdd_core::RealImageDataset;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    BuiltinToy,
    ImageFolder,
}

#[derive(Debug, Clone)]
pub struct DatasetRegistryEntry {
    pub name: &'static str,
    pub kind: SourceKind,
    /// Class names with their source indices in the parent dataset.
    pub classes: Vec<(&'static str, u32)>,
    pub resolution: usize,
}

pub fn registry() -> Vec<DatasetRegistryEntry> {
    vec![
        DatasetRegistryEntry {
            name: "toy",
            kind: SourceKind::BuiltinToy,
            classes: (0..10).map(|i| (TOY_CLASSES[i], i as u32)).collect(),
            resolution: 32,
        },
        DatasetRegistryEntry {
            name: "bird",
            kind: SourceKind::ImageFolder,
            classes: vec![
                ("peacock", 84),
                ("flamingo", 130),
                ("macaw", 88),
                ("pelican", 144),
                ("king penguin", 145),
                ("bald eagle", 22),
                ("toucan", 96),
                ("ostrich", 9),
                ("black swan", 100),
                ("sulphur-crested cockatoo", 89),
            ],
            resolution: 256,
        },
        DatasetRegistryEntry {
            name: "fruit",
            kind: SourceKind::ImageFolder,
            classes: vec![
                ("pineapple", 953),
                ("banana", 954),
                ("strawberry", 949),
                ("orange", 950),
                ("lemon", 951),
                ("pomegranate", 957),
                ("fig", 952),
                ("bell pepper", 945),
                ("cucumber", 943),
                ("granny smith", 948),
            ],
            resolution: 256,
        },
        DatasetRegistryEntry {
            name: "woof",
            kind: SourceKind::ImageFolder,
            classes: vec![
                ("australian terrier", 193),
                ("border terrier", 182),
                ("samoyed", 258),
                ("beagle", 162),
                ("shih-tzu", 155),
                ("english foxhound", 167),
                ("rhodesian ridgeback", 159),
                ("dingo", 273),
                ("golden retriever", 207),
                ("old english sheepdog", 229),
            ],
            resolution: 256,
        },
        DatasetRegistryEntry {
            name: "cat",
            kind: SourceKind::ImageFolder,
            classes: vec![
                ("tabby", 281),
                ("tiger cat", 282),
                ("persian cat", 283),
                ("siamese cat", 284),
                ("egyptian cat", 285),
                ("lion", 291),
                ("tiger", 292),
                ("jaguar", 290),
                ("snow leopard", 289),
                ("lynx", 287),
            ],
            resolution: 256,
        },
        DatasetRegistryEntry {
            name: "nette",
            kind: SourceKind::ImageFolder,
            classes: vec![
                ("tench", 0),
                ("english springer", 217),
                ("cassette player", 482),
                ("chain saw", 491),
                ("church", 497),
                ("french horn", 566),
                ("garbage truck", 569),
                ("gas pump", 571),
                ("golf ball", 574),
                ("parachute", 701),
            ],
            resolution: 256,
        },
    ]
}

const TOY_CLASSES: [&str; 10] = [
    "grating-0", "grating-1", "grating-2", "grating-3", "grating-4", "grating-5", "grating-6",
    "grating-7", "grating-8", "grating-9",
];

pub fn find(name: &str) -> Result<DatasetRegistryEntry> {
    registry()
        .into_iter()
        .find(|e| e.name == name)
        .with_context(|| {
            let names: Vec<&str> = registry().iter().map(|e| e.name).collect();
            format!("unknown dataset '{name}'; registered: {}", names.join(", "))
        })
}

/// Resolve an entry to (train, test) pixel datasets.
pub fn load(
    entry: &DatasetRegistryEntry,
    data_root: Option<&Path>,
    toy_cfg: &ToyConfig,
) -> Result<(RealImageDataset, RealImageDataset)> {
    match entry.kind {
        SourceKind::BuiltinToy => Ok(generate_toy(toy_cfg)),
        SourceKind::ImageFolder => {
            let root = match data_root {
                Some(r) => r,
                None => bail!(
                    "dataset '{}' needs --data-root pointing at a folder with \
                     train/<class>/ and val/<class>/ image directories",
                    entry.name
                ),
            };
            crate::ingest::load_image_folder(root, entry)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_entries_are_wellformed() {
        for entry in registry() {
            assert!(!entry.classes.is_empty(), "{}", entry.name);
            let mut names: Vec<&str> = entry.classes.iter().map(|(n, _)| *n).collect();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), entry.classes.len(), "duplicates in {}", entry.name);
        }
        assert!(find("toy").is_ok());
        assert!(find("bird").is_ok());
        assert!(find("nope").is_err());
    }

    #[test]
    fn image_folder_requires_root() {
        let entry = find("bird").unwrap();
        let toy = ToyConfig::default();
        assert!(load(&entry, None, &toy).is_err());
    }
}

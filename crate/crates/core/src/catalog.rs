//! Mirror of the source database catalog, replayed from observed DDL.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::names;
use crate::sql::ast::ObjectName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Table,
    View,
    Procedure,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub data_type: String,
}

impl Column {
    pub fn new(name: impl Into<String>, data_type: impl Into<String>) -> Self {
        Column { name: name.into(), data_type: data_type.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogObject {
    pub kind: ObjectKind,
    pub schema: String,
    pub name: String,
    pub generation: u32,
    pub columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition_text: Option<String>,
}

impl CatalogObject {
    /// Canonical spelling of a column, matched case-insensitively.
    pub fn column(&self, name: &str) -> Option<&str> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name)).map(|c| c.name.as_str())
    }
}

/// One database's catalog.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CatalogState {
    pub server: String,
    pub database: String,
    /// Live objects keyed by lowercase `schema.name`.
    pub objects: BTreeMap<String, CatalogObject>,
    /// Highest generation ever assigned per key, kept across drops.
    #[serde(default)]
    pub generations: BTreeMap<String, u32>,
}

pub const DEFAULT_SCHEMA: &str = "dbo";

/// Schema and object name with defaults applied. Temp tables live in `tempdb`.
pub fn split_name(name: &ObjectName) -> (String, String) {
    let object = name.name().to_string();
    let schema = match name.schema() {
        Some(s) => s.to_string(),
        None if object.starts_with('#') => "tempdb".to_string(),
        None => DEFAULT_SCHEMA.to_string(),
    };
    (schema, object)
}

pub fn object_key(schema: &str, name: &str) -> String {
    format!("{}.{}", schema.to_lowercase(), name.to_lowercase())
}

impl CatalogState {
    pub fn new(server: impl Into<String>, database: impl Into<String>) -> Self {
        CatalogState { server: server.into(), database: database.into(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Whether `name` points into another database or server.
    fn is_foreign(&self, name: &ObjectName) -> bool {
        let other_db = name.database().is_some_and(|d| !d.eq_ignore_ascii_case(&self.database));
        let other_srv = name.0.len() >= 4 && !name.0[0].is_empty() && !name.0[0].eq_ignore_ascii_case(&self.server);
        other_db || other_srv
    }

    pub fn get(&self, name: &ObjectName) -> Option<&CatalogObject> {
        if self.is_foreign(name) {
            return None;
        }
        let (schema, object) = split_name(name);
        self.objects.get(&object_key(&schema, &object))
    }

    pub fn get_mut(&mut self, name: &ObjectName) -> Option<&mut CatalogObject> {
        if self.is_foreign(name) {
            return None;
        }
        let (schema, object) = split_name(name);
        self.objects.get_mut(&object_key(&schema, &object))
    }

    /// Adds an object, bumping the generation when the name was used before.
    pub fn create(
        &mut self,
        kind: ObjectKind,
        name: &ObjectName,
        columns: Vec<Column>,
        definition_text: Option<String>,
    ) -> &CatalogObject {
        let (schema, object) = split_name(name);
        let key = object_key(&schema, &object);
        let generation = self.generations.get(&key).map_or(1, |g| g + 1);
        self.generations.insert(key.clone(), generation);
        let obj = CatalogObject { kind, schema, name: object, generation, columns, definition_text };
        self.objects.insert(key.clone(), obj);
        &self.objects[&key]
    }

    /// Updates a view or procedure in place (`CREATE OR ALTER`), keeping its generation.
    pub fn replace_definition(
        &mut self,
        kind: ObjectKind,
        name: &ObjectName,
        columns: Vec<Column>,
        definition_text: Option<String>,
    ) {
        match self.get_mut(name) {
            Some(obj) if obj.kind == kind => {
                obj.columns = columns;
                obj.definition_text = definition_text;
            }
            _ => {
                self.create(kind, name, columns, definition_text);
            }
        }
    }

    pub fn drop_object(&mut self, name: &ObjectName) -> Option<CatalogObject> {
        let (schema, object) = split_name(name);
        self.objects.remove(&object_key(&schema, &object))
    }

    pub fn relation_qn(&self, obj: &CatalogObject) -> String {
        names::dataset(&self.server, &self.database, &obj.schema, &obj.name, obj.generation)
    }

    /// Qualified name for a reference, bound or not. Unbound names take the
    /// most recent generation ever seen, or 1.
    pub fn name_qn(&self, name: &ObjectName) -> String {
        if let Some(obj) = self.get(name) {
            return self.relation_qn(obj);
        }
        let (schema, object) = split_name(name);
        let server = if name.0.len() >= 4 && !name.0[0].is_empty() { name.0[0].as_str() } else { &self.server };
        let db = name.database().unwrap_or(&self.database);
        let generation = if self.is_foreign(name) {
            1
        } else {
            self.generations.get(&object_key(&schema, &object)).copied().unwrap_or(1)
        };
        names::dataset(server, db, &schema, &object, generation)
    }

    /// Qualified name `name` will get when created now.
    pub fn name_qn_next(&self, name: &ObjectName) -> String {
        if self.is_foreign(name) {
            return self.name_qn(name);
        }
        let (schema, object) = split_name(name);
        let generation = self.generations.get(&object_key(&schema, &object)).map_or(1, |g| g + 1);
        names::dataset(&self.server, &self.database, &schema, &object, generation)
    }

    pub fn output_qn(&self, hash: &str) -> String {
        format!("ds://{}/{}/_output/{hash}", self.server, self.database)
    }
}

/// Catalogs of every database seen, keyed by `server/database`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CatalogSet {
    pub databases: BTreeMap<String, CatalogState>,
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("catalog snapshot {path} unreadable: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("writing catalog snapshot: {0}")]
    Write(#[from] std::io::Error),
}

impl CatalogSet {
    pub fn get_or_create(&mut self, server: &str, database: &str) -> &mut CatalogState {
        self.databases
            .entry(format!("{server}/{database}"))
            .or_insert_with(|| CatalogState::new(server, database))
    }

    pub fn insert(&mut self, c: CatalogState) {
        self.databases.insert(format!("{}/{}", c.server, c.database), c);
    }

    /// A missing file is an empty set.
    pub fn load(path: &Path) -> Result<Self, StateError> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| StateError::Corrupt { path: path.display().to_string(), reason: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(StateError::Corrupt { path: path.display().to_string(), reason: e.to_string() }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StateError> {
        crate::collector::write_atomic(path, serde_json::to_string_pretty(self).expect("catalog serializes").as_bytes())?;
        Ok(())
    }
}

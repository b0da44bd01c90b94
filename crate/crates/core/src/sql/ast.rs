//! Syntax tree for the supported statements. Expressions are not kept as
//! trees: lineage only needs the columns and subqueries an expression
//! mentions, so each expression is reduced to an [`ExprRefs`] bag.

/// Multi-part object name, outermost first (`db.schema.name`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectName(pub Vec<String>);

impl ObjectName {
    pub fn name(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or("")
    }

    pub fn schema(&self) -> Option<&str> {
        (self.0.len() >= 2).then(|| self.0[self.0.len() - 2].as_str()).filter(|s| !s.is_empty())
    }

    pub fn database(&self) -> Option<&str> {
        (self.0.len() >= 3).then(|| self.0[self.0.len() - 3].as_str()).filter(|s| !s.is_empty())
    }

    pub fn single(s: &str) -> Self {
        ObjectName(vec![s.to_string()])
    }
}

impl std::fmt::Display for ObjectName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColRef {
    /// Everything before the column name (alias, table or schema.table).
    pub qualifier: Vec<String>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExprRefs {
    pub columns: Vec<ColRef>,
    pub subqueries: Vec<Query>,
    /// `COUNT(*)`-style star arguments; they read rows, not columns.
    pub row_star: bool,
}

impl ExprRefs {
    pub fn absorb(&mut self, other: ExprRefs) {
        self.columns.extend(other.columns);
        self.subqueries.extend(other.subqueries);
        self.row_star |= other.row_star;
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty() && self.subqueries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    /// `*`
    Wildcard,
    /// `alias.*`
    QualifiedWildcard(Vec<String>),
    Expr {
        refs: ExprRefs,
        alias: Option<String>,
        /// `SELECT @v = expr`
        assigns_variable: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableSource {
    Named { name: ObjectName, alias: Option<String> },
    Derived { query: Box<Query>, alias: Option<String>, column_aliases: Vec<String> },
    /// Table-valued function or `OPENROWSET`-like source; arguments only.
    Function { name: ObjectName, args: ExprRefs, alias: Option<String> },
    /// `(VALUES (..), (..)) AS v(a, b)`
    Values { rows: Vec<Vec<ExprRefs>>, alias: Option<String>, column_aliases: Vec<String> },
}

impl TableSource {
    pub fn alias(&self) -> Option<&str> {
        match self {
            TableSource::Named { alias, .. }
            | TableSource::Derived { alias, .. }
            | TableSource::Function { alias, .. }
            | TableSource::Values { alias, .. } => alias.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRef {
    pub source: TableSource,
    /// Join predicate, when this source was joined with `ON`.
    pub on: Option<ExprRefs>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Select {
    pub top: Option<ExprRefs>,
    pub items: Vec<SelectItem>,
    pub into: Option<ObjectName>,
    pub from: Vec<TableRef>,
    pub where_: Option<ExprRefs>,
    pub group_by: Option<ExprRefs>,
    pub having: Option<ExprRefs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cte {
    pub name: String,
    pub columns: Vec<String>,
    pub query: Query,
}

/// A select with optional CTEs, set operations and ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Query {
    pub ctes: Vec<Cte>,
    pub body: Select,
    /// `UNION`/`EXCEPT`/`INTERSECT` branches, positionally aligned with `body`.
    pub set_branches: Vec<Select>,
    pub order_by: Option<ExprRefs>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertSource {
    Values(Vec<Vec<ExprRefs>>),
    Query(Box<Query>),
    Exec(Option<ObjectName>),
    DefaultValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub column: ColRef,
    pub value: ExprRefs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MergeAction {
    Update(Vec<Assignment>),
    Delete,
    Insert { columns: Vec<String>, values: Vec<ExprRefs> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeClause {
    pub condition: Option<ExprRefs>,
    pub action: MergeAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Table,
    View,
    Procedure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDef {
    pub name: String,
    pub data_type: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Query(Query),
    Insert { ctes: Vec<Cte>, target: ObjectName, columns: Vec<String>, source: InsertSource },
    Update {
        ctes: Vec<Cte>,
        target: ObjectName,
        assignments: Vec<Assignment>,
        from: Vec<TableRef>,
        where_: Option<ExprRefs>,
    },
    Delete { ctes: Vec<Cte>, target: ObjectName, from: Vec<TableRef>, where_: Option<ExprRefs> },
    Merge {
        target: ObjectName,
        target_alias: Option<String>,
        source: TableRef,
        on: ExprRefs,
        clauses: Vec<MergeClause>,
    },
    BulkInsert { target: ObjectName, file: String },
    Truncate { target: ObjectName },
    CreateTable { name: ObjectName, columns: Vec<ColumnDef> },
    AlterTableAdd { name: ObjectName, columns: Vec<ColumnDef> },
    AlterTableDropColumn { name: ObjectName, columns: Vec<String> },
    CreateView { name: ObjectName, columns: Vec<String>, query: Query, text: String, or_alter: bool },
    CreateProcedure { name: ObjectName, text: String, or_alter: bool },
    Drop { kind: ObjectKind, names: Vec<ObjectName>, if_exists: bool },
    /// `EXEC proc ...`; `proc` is `None` for dynamic SQL.
    Exec { proc: Option<ObjectName> },
    If { then: Vec<Statement>, otherwise: Vec<Statement> },
    While { body: Vec<Statement> },
    Block(Vec<Statement>),
    /// SET, DECLARE, PRINT, transactions and other statements without data flow.
    NoData { keyword: String, refs: ExprRefs },
}

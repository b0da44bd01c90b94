//! Recursive-descent parser for the T-SQL subset.

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

type PResult<T> = Result<T, ParseError>;

/// One top-level statement and its byte span in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub result: PResult<Statement>,
    pub span: (usize, usize),
}

/// Keywords that may not serve as aliases or bare column names.
const RESERVED: &[&str] = &[
    "ADD", "ALL", "ALTER", "AND", "ANY", "APPLY", "AS", "ASC", "BEGIN", "BETWEEN", "BREAK", "BULK", "BY", "CASE", "CATCH",
    "CLOSE", "COLLATE", "COMMIT", "CONTINUE", "CREATE", "CROSS", "DEALLOCATE", "DECLARE", "DEFAULT", "DELETE", "DESC",
    "DISTINCT", "DROP", "ELSE", "END", "ESCAPE", "EXCEPT", "EXEC", "EXECUTE", "EXISTS", "FETCH", "FOR", "FROM", "FULL",
    "GO", "GOTO", "GROUP", "HAVING", "IF", "IN", "INNER", "INSERT", "INTERSECT", "INTO", "IS", "JOIN", "LEFT", "LIKE",
    "MERGE", "NOT", "NULL", "OFFSET", "ON", "OPEN", "OPTION", "OR", "ORDER", "OUTER", "OUTPUT", "OVER", "PIVOT", "PRINT",
    "RAISERROR", "RETURN", "RIGHT", "ROLLBACK", "SAVE", "SELECT", "SET", "TABLE", "THEN", "THROW", "TOP", "TRUNCATE",
    "TRY", "UNION", "UNPIVOT", "UPDATE", "USE", "USING", "VALUES", "WAITFOR", "WHEN", "WHERE", "WHILE", "WITH",
];

/// Keywords that begin a new statement when semicolons are omitted.
const STATEMENT_START: &[&str] = &[
    "ALTER", "BEGIN", "BREAK", "BULK", "CLOSE", "COMMIT", "CONTINUE", "CREATE", "DEALLOCATE", "DECLARE", "DELETE", "DROP",
    "ELSE", "END", "EXEC", "EXECUTE", "FETCH", "GOTO", "IF", "INSERT", "MERGE", "OPEN", "PRINT", "RAISERROR", "RETURN",
    "ROLLBACK", "SAVE", "SELECT", "SET", "THROW", "TRUNCATE", "UPDATE", "USE", "WAITFOR", "WHILE", "WITH",
];

/// Functions whose first argument is a date-part keyword, not a column.
const DATEPART_FUNCS: &[&str] = &["DATEADD", "DATEDIFF", "DATEDIFF_BIG", "DATEPART", "DATENAME", "DATETRUNC", "DATE_BUCKET"];

/// Niladic functions written without parentheses.
const NILADIC: &[&str] =
    &["CURRENT_TIMESTAMP", "CURRENT_USER", "SESSION_USER", "SYSTEM_USER", "CURRENT_DATE", "USER", "NULL", "TRUE", "FALSE"];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|k| k.eq_ignore_ascii_case(word))
}

pub fn parse_script(src: &str) -> Result<Vec<Parsed>, ParseError> {
    let toks = tokenize(src).map_err(|e| ParseError { pos: e.pos, msg: e.msg })?;
    let mut p = Parser { toks, i: 0, src };
    let mut out = Vec::new();
    loop {
        while p.eat(&Tok::Semi) {}
        if p.at_end() {
            break;
        }
        let start_tok = p.i;
        let start = p.pos();
        let result = p.statement();
        if result.is_err() {
            p.i = start_tok;
            p.recover();
        }
        let end = p.prev_end();
        out.push(Parsed { result, span: (start, end) });
    }
    Ok(out)
}

/// Parses text that must hold exactly one statement.
pub fn parse_statement(src: &str) -> PResult<Statement> {
    let mut all = parse_script(src)?;
    match all.len() {
        1 => all.pop().unwrap().result,
        0 => Err(ParseError { pos: 0, msg: "empty statement".into() }),
        n => Err(ParseError { pos: all[1].span.0, msg: format!("expected one statement, found {n}") }),
    }
}

struct Parser<'a> {
    toks: Vec<Token>,
    i: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn at_end(&self) -> bool {
        self.i >= self.toks.len()
    }

    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.i)
    }

    fn peek_at(&self, k: usize) -> Option<&Token> {
        self.toks.get(self.i + k)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.src.len(), |t| t.pos)
    }

    /// Byte offset just past the previous token.
    fn prev_end(&self) -> usize {
        match self.i.checked_sub(1).and_then(|j| self.toks.get(j)) {
            None => 0,
            Some(t) => {
                let next = self.toks.get(self.i).map_or(self.src.len(), |n| n.pos);
                // trim trailing whitespace between the previous token and the next
                let slice = &self.src[t.pos..next];
                t.pos + slice.trim_end().len()
            }
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(ParseError { pos: self.pos(), msg: msg.into() })
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.toks.get(self.i).cloned();
        self.i += 1;
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        self.peek().is_some_and(|t| t.is_kw(kw))
    }

    fn is_kw_at(&self, k: usize, kw: &str) -> bool {
        self.peek_at(k).is_some_and(|t| t.is_kw(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected {kw}"))
        }
    }

    fn is(&self, t: &Tok) -> bool {
        self.peek().is_some_and(|x| &x.tok == t)
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.is(t) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok) -> PResult<()> {
        if self.eat(t) {
            Ok(())
        } else {
            self.err(format!("expected {t:?}"))
        }
    }

    fn at_statement_start(&self) -> bool {
        match self.peek() {
            Some(t) => STATEMENT_START.iter().any(|k| t.is_kw(k)),
            None => true,
        }
    }

    /// Any identifier, keywords included (for names after `.` and such).
    fn any_ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Token { tok: Tok::Ident { text, .. }, .. }) => {
                let s = text.clone();
                self.i += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    /// Identifier that is not a reserved word (unless quoted).
    fn plain_ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Token { tok: Tok::Ident { text, quoted }, .. }) if *quoted || !is_reserved(text) => {
                let s = text.clone();
                self.i += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn peek_plain_ident(&self) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Ident { text, quoted }, .. }) if *quoted || !is_reserved(text))
    }

    fn object_name(&mut self) -> PResult<ObjectName> {
        let mut parts = vec![self.any_ident()?];
        while self.is(&Tok::Dot) {
            self.i += 1;
            if self.is(&Tok::Dot) {
                parts.push(String::new());
                continue;
            }
            parts.push(self.any_ident()?);
        }
        Ok(ObjectName(parts))
    }

    /// Skips a balanced parenthesized group starting at `(`.
    fn skip_parens(&mut self) -> PResult<()> {
        self.expect(&Tok::LParen)?;
        let mut depth = 1;
        while depth > 0 {
            match self.bump() {
                None => return self.err("unbalanced parentheses"),
                Some(Token { tok: Tok::LParen, .. }) => depth += 1,
                Some(Token { tok: Tok::RParen, .. }) => depth -= 1,
                _ => {}
            }
        }
        Ok(())
    }

    /// Skips tokens up to the next statement boundary at depth 0.
    fn skip_to_boundary(&mut self) -> PResult<()> {
        loop {
            if self.at_end() || self.is(&Tok::Semi) || self.at_statement_start() {
                return Ok(());
            }
            if self.is(&Tok::LParen) {
                self.skip_parens()?;
            } else if self.is(&Tok::RParen) {
                return self.err("unexpected )");
            } else {
                self.i += 1;
            }
        }
    }

    /// Error recovery: resume after the next top-level `;`.
    fn recover(&mut self) {
        let mut depth = 0i32;
        while let Some(t) = self.bump() {
            match t.tok {
                Tok::LParen => depth += 1,
                Tok::RParen => depth -= 1,
                Tok::Semi if depth <= 0 => return,
                _ => {}
            }
        }
    }

    fn statement(&mut self) -> PResult<Statement> {
        let Some(t) = self.peek().cloned() else { return self.err("expected statement") };
        let word = match &t.tok {
            Tok::Ident { text, quoted: false } => text.to_ascii_uppercase(),
            Tok::LParen => return Ok(Statement::Query(self.query()?)),
            _ => return self.err("expected statement"),
        };
        match word.as_str() {
            "SELECT" => Ok(Statement::Query(self.query()?)),
            "WITH" => {
                let ctes = self.ctes()?;
                self.statement_after_ctes(ctes)
            }
            "INSERT" => self.insert(Vec::new()),
            "UPDATE" => {
                if self.is_kw_at(1, "STATISTICS") {
                    return self.no_data();
                }
                self.update(Vec::new())
            }
            "DELETE" => self.delete(Vec::new()),
            "MERGE" => self.merge(),
            "BULK" => self.bulk_insert(),
            "TRUNCATE" => {
                self.i += 1;
                self.expect_kw("TABLE")?;
                Ok(Statement::Truncate { target: self.object_name()? })
            }
            "CREATE" => self.create(),
            "ALTER" => self.alter(),
            "DROP" => self.drop_stmt(),
            "EXEC" | "EXECUTE" => self.exec(),
            "IF" => self.if_stmt(),
            "WHILE" => {
                self.i += 1;
                self.expr()?;
                let body = vec![self.statement()?];
                Ok(Statement::While { body })
            }
            "BEGIN" => self.begin(),
            "SET" => self.set(),
            "DECLARE" => self.declare(),
            _ if matches!(self.peek_at(1), Some(Token { tok: Tok::Op(o), .. }) if o == ":") && !is_reserved(&word) => {
                // label
                self.i += 2;
                Ok(Statement::NoData { keyword: "LABEL".into(), refs: ExprRefs::default() })
            }
            "PRINT" | "RETURN" | "COMMIT" | "ROLLBACK" | "SAVE" | "BREAK" | "CONTINUE" | "GOTO" | "USE" | "RAISERROR"
            | "THROW" | "WAITFOR" | "OPEN" | "CLOSE" | "FETCH" | "DEALLOCATE" | "DBCC" | "GRANT" | "REVOKE" | "DENY"
            | "CHECKPOINT" | "RECONFIGURE" | "SHUTDOWN" | "KILL" | "SETUSER" | "REVERT" | "BACKUP" | "RESTORE" => {
                self.no_data()
            }
            _ => self.err(format!("unsupported statement {word}")),
        }
    }

    fn no_data(&mut self) -> PResult<Statement> {
        let keyword = self.any_ident()?.to_ascii_uppercase();
        if keyword == "COMMIT" || keyword == "ROLLBACK" || keyword == "SAVE" {
            // COMMIT TRAN name; the next keyword is not a new statement
            let _ = self.eat_kw("TRAN") || self.eat_kw("TRANSACTION") || self.eat_kw("WORK");
        }
        self.skip_to_boundary()?;
        Ok(Statement::NoData { keyword, refs: ExprRefs::default() })
    }

    fn statement_after_ctes(&mut self, ctes: Vec<Cte>) -> PResult<Statement> {
        if self.is_kw("SELECT") || self.is(&Tok::LParen) {
            let mut q = self.query()?;
            q.ctes = ctes;
            Ok(Statement::Query(q))
        } else if self.is_kw("INSERT") {
            self.insert(ctes)
        } else if self.is_kw("UPDATE") {
            self.update(ctes)
        } else if self.is_kw("DELETE") {
            self.delete(ctes)
        } else if self.is_kw("MERGE") {
            self.merge()
        } else {
            self.err("expected statement after WITH")
        }
    }

    fn ctes(&mut self) -> PResult<Vec<Cte>> {
        self.expect_kw("WITH")?;
        let mut out = Vec::new();
        loop {
            let name = self.plain_ident()?;
            let columns = if self.is(&Tok::LParen) { self.ident_list()? } else { Vec::new() };
            self.expect_kw("AS")?;
            self.expect(&Tok::LParen)?;
            let query = self.query()?;
            self.expect(&Tok::RParen)?;
            out.push(Cte { name, columns, query });
            if !self.eat(&Tok::Comma) {
                return Ok(out);
            }
        }
    }

    /// `( a, b, c )`
    fn ident_list(&mut self) -> PResult<Vec<String>> {
        self.expect(&Tok::LParen)?;
        let mut v = vec![self.any_ident()?];
        while self.eat(&Tok::Comma) {
            v.push(self.any_ident()?);
        }
        self.expect(&Tok::RParen)?;
        Ok(v)
    }

    // ---- queries -------------------------------------------------------

    fn query(&mut self) -> PResult<Query> {
        let ctes = if self.is_kw("WITH") { self.ctes()? } else { Vec::new() };
        let body = self.select_term()?;
        let mut set_branches = Vec::new();
        loop {
            if self.eat_kw("UNION") {
                self.eat_kw("ALL");
            } else if !(self.eat_kw("EXCEPT") || self.eat_kw("INTERSECT")) {
                break;
            }
            set_branches.push(self.select_term()?);
        }
        let mut order_by = None;
        if self.is_kw("ORDER") && self.is_kw_at(1, "BY") {
            self.i += 2;
            let mut refs = self.expr()?;
            let _ = self.eat_kw("ASC") || self.eat_kw("DESC");
            while self.eat(&Tok::Comma) {
                refs.absorb(self.expr()?);
                let _ = self.eat_kw("ASC") || self.eat_kw("DESC");
            }
            if self.eat_kw("OFFSET") {
                self.expr()?;
                let _ = self.eat_kw("ROWS") || self.eat_kw("ROW");
                if self.eat_kw("FETCH") {
                    let _ = self.eat_kw("NEXT") || self.eat_kw("FIRST");
                    self.expr()?;
                    let _ = self.eat_kw("ROWS") || self.eat_kw("ROW");
                    self.expect_kw("ONLY")?;
                }
            }
            order_by = Some(refs);
        }
        if self.is_kw("FOR") && (self.is_kw_at(1, "XML") || self.is_kw_at(1, "JSON")) {
            self.i += 2;
            while !(self.at_end() || self.is(&Tok::Semi) || self.is(&Tok::RParen) || self.at_statement_start()) {
                if self.is(&Tok::LParen) {
                    self.skip_parens()?;
                } else {
                    self.i += 1;
                }
            }
        }
        if self.eat_kw("OPTION") {
            self.skip_parens()?;
        }
        Ok(Query { ctes, body, set_branches, order_by })
    }

    /// A SELECT block or a parenthesized query used as a set operand.
    fn select_term(&mut self) -> PResult<Select> {
        if self.eat(&Tok::LParen) {
            let q = self.query()?;
            self.expect(&Tok::RParen)?;
            // flatten: the operand's first block stands for it
            let mut s = q.body;
            for b in q.set_branches {
                s.from.extend(b.from);
            }
            return Ok(s);
        }
        self.select()
    }

    fn select(&mut self) -> PResult<Select> {
        self.expect_kw("SELECT")?;
        let _ = self.eat_kw("ALL") || self.eat_kw("DISTINCT");
        let mut s = Select::default();
        if self.eat_kw("TOP") {
            s.top = Some(if self.is(&Tok::LParen) { self.paren_expr()? } else { self.operand()? });
            self.eat_kw("PERCENT");
            if self.is_kw("WITH") && self.is_kw_at(1, "TIES") {
                self.i += 2;
            }
        }
        s.items.push(self.select_item()?);
        while self.eat(&Tok::Comma) {
            s.items.push(self.select_item()?);
        }
        if self.eat_kw("INTO") {
            s.into = Some(self.object_name()?);
        }
        if self.eat_kw("FROM") {
            s.from = self.from_list()?;
        }
        if self.eat_kw("WHERE") {
            s.where_ = Some(self.expr()?);
        }
        if self.is_kw("GROUP") && self.is_kw_at(1, "BY") {
            self.i += 2;
            let _ = self.eat_kw("ALL");
            let mut g = self.expr()?;
            while self.eat(&Tok::Comma) {
                g.absorb(self.expr()?);
            }
            if self.is_kw("WITH") && (self.is_kw_at(1, "ROLLUP") || self.is_kw_at(1, "CUBE")) {
                self.i += 2;
            }
            s.group_by = Some(g);
        }
        if self.eat_kw("HAVING") {
            s.having = Some(self.expr()?);
        }
        Ok(s)
    }

    fn select_item(&mut self) -> PResult<SelectItem> {
        if self.eat(&Tok::Star) {
            return Ok(SelectItem::Wildcard);
        }
        // alias.* / schema.table.*
        if matches!(self.peek(), Some(Token { tok: Tok::Ident { .. }, .. })) {
            let save = self.i;
            let mut parts = Vec::new();
            while let Some(Token { tok: Tok::Ident { text, .. }, .. }) = self.peek() {
                parts.push(text.clone());
                self.i += 1;
                if !self.eat(&Tok::Dot) {
                    break;
                }
                if self.eat(&Tok::Star) {
                    return Ok(SelectItem::QualifiedWildcard(parts));
                }
            }
            self.i = save;
        }
        // @v = expr
        if matches!(self.peek(), Some(Token { tok: Tok::Var(_), .. }))
            && matches!(self.peek_at(1), Some(Token { tok: Tok::Op(o), .. }) if o.ends_with('=') && o != "<=" && o != ">=" && o != "!=")
        {
            self.i += 2;
            let refs = self.expr()?;
            return Ok(SelectItem::Expr { refs, alias: None, assigns_variable: true });
        }
        // alias = expr
        if self.peek_plain_ident() && matches!(self.peek_at(1), Some(Token { tok: Tok::Op(o), .. }) if o == "=") {
            let alias = self.plain_ident()?;
            self.i += 1;
            let refs = self.expr()?;
            return Ok(SelectItem::Expr { refs, alias: Some(alias), assigns_variable: false });
        }
        let refs = self.expr()?;
        let alias = self.opt_alias()?;
        Ok(SelectItem::Expr { refs, alias, assigns_variable: false })
    }

    /// `[AS] alias`, where the alias may be a string literal after AS.
    fn opt_alias(&mut self) -> PResult<Option<String>> {
        if self.eat_kw("AS") {
            if let Some(Token { tok: Tok::Str(s), .. }) = self.peek() {
                let s = s.clone();
                self.i += 1;
                return Ok(Some(s));
            }
            return Ok(Some(self.any_ident()?));
        }
        if self.peek_plain_ident() {
            return Ok(Some(self.plain_ident()?));
        }
        if let Some(Token { tok: Tok::Str(s), .. }) = self.peek() {
            let s = s.clone();
            self.i += 1;
            return Ok(Some(s));
        }
        Ok(None)
    }

    fn from_list(&mut self) -> PResult<Vec<TableRef>> {
        let mut refs = self.table_factor(None)?;
        loop {
            if self.eat(&Tok::Comma) {
                refs.extend(self.table_factor(None)?);
                continue;
            }
            let save = self.i;
            let mut kind = None;
            if self.eat_kw("CROSS") {
                if self.eat_kw("APPLY") {
                    kind = Some(false);
                } else {
                    self.expect_kw("JOIN")?;
                    kind = Some(false);
                }
            } else if self.is_kw("OUTER") && self.is_kw_at(1, "APPLY") {
                self.i += 2;
                kind = Some(false);
            } else {
                let _ = self.eat_kw("INNER")
                    || ((self.eat_kw("LEFT") || self.eat_kw("RIGHT") || self.eat_kw("FULL")) && {
                        self.eat_kw("OUTER");
                        true
                    });
                // join hints
                let _ = self.eat_kw("LOOP") || self.eat_kw("HASH") || self.eat_kw("MERGE") || self.eat_kw("REMOTE");
                if self.eat_kw("JOIN") {
                    kind = Some(true);
                } else {
                    self.i = save;
                }
            }
            match kind {
                None => return Ok(refs),
                Some(needs_on) => {
                    let mut joined = self.table_factor(None)?;
                    if needs_on {
                        self.expect_kw("ON")?;
                        let on = self.expr()?;
                        if let Some(last) = joined.last_mut() {
                            last.on = Some(on);
                        }
                    }
                    refs.append(&mut joined);
                }
            }
        }
    }

    fn table_hints(&mut self) -> PResult<()> {
        if self.is_kw("WITH") && matches!(self.peek_at(1), Some(Token { tok: Tok::LParen, .. })) {
            self.i += 1;
            self.skip_parens()?;
        }
        Ok(())
    }

    fn table_factor(&mut self, _hint: Option<()>) -> PResult<Vec<TableRef>> {
        if self.is(&Tok::LParen) {
            if self.is_kw_at(1, "SELECT") || self.is_kw_at(1, "WITH") || matches!(self.peek_at(1), Some(Token { tok: Tok::LParen, .. })) && self.is_kw_at(2, "SELECT") {
                self.i += 1;
                let q = self.query()?;
                self.expect(&Tok::RParen)?;
                let alias = self.opt_alias()?;
                let column_aliases = if self.is(&Tok::LParen) { self.ident_list()? } else { Vec::new() };
                return Ok(vec![TableRef {
                    source: TableSource::Derived { query: Box::new(q), alias, column_aliases },
                    on: None,
                }]);
            }
            if self.is_kw_at(1, "VALUES") {
                self.i += 2;
                let rows = self.values_rows()?;
                self.expect(&Tok::RParen)?;
                let alias = self.opt_alias()?;
                let column_aliases = if self.is(&Tok::LParen) { self.ident_list()? } else { Vec::new() };
                return Ok(vec![TableRef { source: TableSource::Values { rows, alias, column_aliases }, on: None }]);
            }
            // parenthesized join
            self.i += 1;
            let inner = self.from_list()?;
            self.expect(&Tok::RParen)?;
            return Ok(inner);
        }
        if matches!(self.peek(), Some(Token { tok: Tok::Var(_), .. })) {
            // table variable
            let Some(Token { tok: Tok::Var(v), .. }) = self.bump() else { unreachable!() };
            let alias = self.opt_alias()?;
            return Ok(vec![TableRef { source: TableSource::Named { name: ObjectName::single(&v), alias }, on: None }]);
        }
        let name = self.object_name()?;
        if self.is(&Tok::LParen) {
            self.i += 1;
            let mut args = ExprRefs::default();
            if !self.is(&Tok::RParen) {
                args = self.expr()?;
                while self.eat(&Tok::Comma) {
                    args.absorb(self.expr()?);
                }
            }
            self.expect(&Tok::RParen)?;
            let alias = self.opt_alias()?;
            if self.is(&Tok::LParen) {
                self.ident_list()?;
            }
            return Ok(vec![TableRef { source: TableSource::Function { name, args, alias }, on: None }]);
        }
        self.table_hints()?;
        let alias = self.opt_alias()?;
        self.table_hints()?;
        if self.is_kw("PIVOT") || self.is_kw("UNPIVOT") || self.is_kw("TABLESAMPLE") {
            return self.err("PIVOT/UNPIVOT/TABLESAMPLE not supported");
        }
        Ok(vec![TableRef { source: TableSource::Named { name, alias }, on: None }])
    }

    fn values_rows(&mut self) -> PResult<Vec<Vec<ExprRefs>>> {
        let mut rows = Vec::new();
        loop {
            self.expect(&Tok::LParen)?;
            let mut row = vec![self.expr()?];
            while self.eat(&Tok::Comma) {
                row.push(self.expr()?);
            }
            self.expect(&Tok::RParen)?;
            rows.push(row);
            if !self.eat(&Tok::Comma) {
                return Ok(rows);
            }
        }
    }

    // ---- expressions ----------------------------------------------------

    fn paren_expr(&mut self) -> PResult<ExprRefs> {
        self.expect(&Tok::LParen)?;
        let e = self.expr()?;
        self.expect(&Tok::RParen)?;
        Ok(e)
    }

    /// operand (binary-operator operand)*
    fn expr(&mut self) -> PResult<ExprRefs> {
        let mut refs = self.operand()?;
        loop {
            let Some(t) = self.peek() else { break };
            match &t.tok {
                Tok::Op(o) if o != "::" => {
                    self.i += 1;
                    refs.absorb(self.operand()?);
                }
                Tok::Star => {
                    self.i += 1;
                    refs.absorb(self.operand()?);
                }
                Tok::Ident { quoted: false, .. } => {
                    if self.eat_kw("AND") || self.eat_kw("OR") {
                        refs.absorb(self.operand()?);
                    } else if self.is_kw("NOT")
                        && (self.is_kw_at(1, "LIKE") || self.is_kw_at(1, "IN") || self.is_kw_at(1, "BETWEEN"))
                    {
                        self.i += 1;
                    } else if self.eat_kw("LIKE") {
                        refs.absorb(self.operand()?);
                        if self.eat_kw("ESCAPE") {
                            self.operand()?;
                        }
                    } else if self.eat_kw("BETWEEN") {
                        refs.absorb(self.operand()?);
                        self.expect_kw("AND")?;
                        refs.absorb(self.operand()?);
                    } else if self.eat_kw("IN") {
                        self.expect(&Tok::LParen)?;
                        if self.is_kw("SELECT") || self.is_kw("WITH") {
                            refs.subqueries.push(self.query()?);
                        } else {
                            refs.absorb(self.expr()?);
                            while self.eat(&Tok::Comma) {
                                refs.absorb(self.expr()?);
                            }
                        }
                        self.expect(&Tok::RParen)?;
                    } else if self.eat_kw("IS") {
                        self.eat_kw("NOT");
                        if !(self.eat_kw("NULL") || self.eat_kw("DISTINCT")) {
                            return self.err("expected NULL after IS");
                        }
                        if self.eat_kw("FROM") {
                            refs.absorb(self.operand()?);
                        }
                    } else if self.eat_kw("COLLATE") {
                        self.any_ident()?;
                    } else if self.is_kw("AT") && self.is_kw_at(1, "TIME") {
                        self.i += 3; // AT TIME ZONE
                        refs.absorb(self.operand()?);
                    } else {
                        break;
                    }
                }
                _ => break,
            }
        }
        Ok(refs)
    }

    fn operand(&mut self) -> PResult<ExprRefs> {
        let Some(t) = self.peek().cloned() else { return self.err("expected expression") };
        match t.tok {
            Tok::Number(_) | Tok::Str(_) | Tok::Var(_) => {
                self.i += 1;
                Ok(ExprRefs::default())
            }
            Tok::Op(ref o) if o == "-" || o == "+" || o == "~" => {
                self.i += 1;
                self.operand()
            }
            Tok::LParen => {
                self.i += 1;
                let mut refs = ExprRefs::default();
                if self.is_kw("SELECT") || self.is_kw("WITH") {
                    refs.subqueries.push(self.query()?);
                } else {
                    refs = self.expr()?;
                    while self.eat(&Tok::Comma) {
                        refs.absorb(self.expr()?);
                    }
                }
                self.expect(&Tok::RParen)?;
                Ok(refs)
            }
            Tok::Ident { ref text, quoted } => {
                let upper = text.to_ascii_uppercase();
                if !quoted {
                    match upper.as_str() {
                        "NOT" => {
                            self.i += 1;
                            return self.operand();
                        }
                        "EXISTS" => {
                            self.i += 1;
                            self.expect(&Tok::LParen)?;
                            let q = self.query()?;
                            self.expect(&Tok::RParen)?;
                            return Ok(ExprRefs { subqueries: vec![q], ..Default::default() });
                        }
                        "CASE" => return self.case_expr(),
                        "CAST" | "TRY_CAST" if self.is_lparen_at(1) => {
                            self.i += 2;
                            let e = self.expr()?;
                            self.expect_kw("AS")?;
                            self.data_type()?;
                            self.expect(&Tok::RParen)?;
                            return Ok(e);
                        }
                        "CONVERT" | "TRY_CONVERT" if self.is_lparen_at(1) => {
                            self.i += 2;
                            self.data_type()?;
                            self.expect(&Tok::Comma)?;
                            let e = self.expr()?;
                            if self.eat(&Tok::Comma) {
                                self.expr()?;
                            }
                            self.expect(&Tok::RParen)?;
                            return Ok(e);
                        }
                        "NEXT" if self.is_kw_at(1, "VALUE") && self.is_kw_at(2, "FOR") => {
                            self.i += 3;
                            self.object_name()?;
                            return Ok(ExprRefs::default());
                        }
                        _ if NILADIC.contains(&upper.as_str()) && !self.is_lparen_at(1) => {
                            self.i += 1;
                            return Ok(ExprRefs::default());
                        }
                        _ => {}
                    }
                    if is_reserved(&upper) && !self.is_lparen_at(1) {
                        return self.err(format!("unexpected keyword {upper}"));
                    }
                }
                let name = self.object_name()?;
                if self.is(&Tok::LParen) {
                    return self.function_call(&name);
                }
                let mut parts = name.0;
                let col = parts.pop().unwrap();
                Ok(ExprRefs { columns: vec![ColRef { qualifier: parts, name: col }], ..Default::default() })
            }
            _ => self.err("expected expression"),
        }
    }

    fn is_lparen_at(&self, k: usize) -> bool {
        matches!(self.peek_at(k), Some(Token { tok: Tok::LParen, .. }))
    }

    fn function_call(&mut self, name: &ObjectName) -> PResult<ExprRefs> {
        self.expect(&Tok::LParen)?;
        let upper = name.name().to_ascii_uppercase();
        let mut refs = ExprRefs::default();
        if self.eat(&Tok::Star) {
            refs.row_star = true;
        } else if !self.is(&Tok::RParen) {
            let _ = self.eat_kw("DISTINCT") || self.eat_kw("ALL");
            if DATEPART_FUNCS.contains(&upper.as_str()) {
                self.any_ident()?;
            } else {
                refs.absorb(self.expr()?);
            }
            while self.eat(&Tok::Comma) {
                refs.absorb(self.expr()?);
            }
            if self.eat_kw("AS") {
                self.data_type()?;
            }
        }
        self.expect(&Tok::RParen)?;
        if self.is_kw("WITHIN") && self.is_kw_at(1, "GROUP") {
            self.i += 2;
            self.skip_parens()?;
        }
        if self.eat_kw("OVER") {
            self.skip_parens()?;
        }
        Ok(refs)
    }

    fn case_expr(&mut self) -> PResult<ExprRefs> {
        self.expect_kw("CASE")?;
        let mut refs = ExprRefs::default();
        if !self.is_kw("WHEN") {
            refs.absorb(self.expr()?);
        }
        while self.eat_kw("WHEN") {
            refs.absorb(self.expr()?);
            self.expect_kw("THEN")?;
            refs.absorb(self.expr()?);
        }
        if self.eat_kw("ELSE") {
            refs.absorb(self.expr()?);
        }
        self.expect_kw("END")?;
        Ok(refs)
    }

    /// `name [ ( n [, m] | MAX ) ]`, returned as written.
    fn data_type(&mut self) -> PResult<String> {
        let name = self.object_name()?;
        let mut s = name.to_string();
        if self.is(&Tok::LParen) {
            let start = self.pos();
            self.skip_parens()?;
            s.push_str(&self.src[start..self.prev_end()]);
        }
        Ok(s)
    }

    // ---- DML ------------------------------------------------------------

    fn output_clause(&mut self) -> PResult<()> {
        if self.eat_kw("OUTPUT") {
            self.select_item()?;
            while self.eat(&Tok::Comma) {
                self.select_item()?;
            }
            if self.eat_kw("INTO") {
                self.table_factor(None)?;
                if self.is(&Tok::LParen) {
                    self.ident_list()?;
                }
            }
        }
        Ok(())
    }

    fn insert(&mut self, ctes: Vec<Cte>) -> PResult<Statement> {
        self.expect_kw("INSERT")?;
        if self.eat_kw("TOP") {
            self.paren_expr()?;
            self.eat_kw("PERCENT");
        }
        self.eat_kw("INTO");
        let target = self.insert_target()?;
        self.table_hints()?;
        let columns = if self.is(&Tok::LParen) && !(self.is_kw_at(1, "SELECT") || self.is_kw_at(1, "WITH")) {
            self.ident_list()?
        } else {
            Vec::new()
        };
        self.output_clause()?;
        let source = if self.eat_kw("VALUES") {
            InsertSource::Values(self.values_rows()?)
        } else if self.is_kw("DEFAULT") && self.is_kw_at(1, "VALUES") {
            self.i += 2;
            InsertSource::DefaultValues
        } else if self.is_kw("EXEC") || self.is_kw("EXECUTE") {
            match self.exec()? {
                Statement::Exec { proc } => InsertSource::Exec(proc),
                _ => unreachable!(),
            }
        } else {
            InsertSource::Query(Box::new(self.query()?))
        };
        Ok(Statement::Insert { ctes, target, columns, source })
    }

    fn insert_target(&mut self) -> PResult<ObjectName> {
        if let Some(Token { tok: Tok::Var(v), .. }) = self.peek() {
            let v = v.clone();
            self.i += 1;
            return Ok(ObjectName::single(&v));
        }
        self.object_name()
    }

    fn assignment(&mut self) -> PResult<Option<Assignment>> {
        // @v = col = expr, @v = expr, col = expr, col += expr
        if let Some(Token { tok: Tok::Var(_), .. }) = self.peek() {
            self.i += 1;
            if !matches!(self.peek(), Some(Token { tok: Tok::Op(o), .. }) if o.ends_with('=')) {
                return self.err("expected = in assignment");
            }
            self.i += 1;
            if self.peek_plain_ident()
                && matches!(self.peek_at(1), Some(Token { tok: Tok::Op(o), .. }) if o == "=")
            {
                return self.assignment();
            }
            self.expr()?;
            return Ok(None);
        }
        let name = self.object_name()?;
        let mut parts = name.0;
        let col = parts.pop().unwrap();
        match self.peek() {
            Some(Token { tok: Tok::Op(o), .. }) if o.ends_with('=') && o != "<=" && o != ">=" && o != "!=" => {
                let compound = o != "=";
                self.i += 1;
                let mut value = self.expr()?;
                let column = ColRef { qualifier: parts, name: col };
                if compound {
                    value.columns.push(column.clone());
                }
                Ok(Some(Assignment { column, value }))
            }
            Some(Token { tok: Tok::Dot, .. }) => self.err("method-call assignment not supported"),
            _ => self.err("expected = in assignment"),
        }
    }

    fn assignments(&mut self) -> PResult<Vec<Assignment>> {
        let mut v = Vec::new();
        loop {
            if let Some(a) = self.assignment()? {
                v.push(a);
            }
            if !self.eat(&Tok::Comma) {
                return Ok(v);
            }
        }
    }

    fn update(&mut self, ctes: Vec<Cte>) -> PResult<Statement> {
        self.expect_kw("UPDATE")?;
        if self.eat_kw("TOP") {
            self.paren_expr()?;
            self.eat_kw("PERCENT");
        }
        let target = self.insert_target()?;
        self.table_hints()?;
        self.expect_kw("SET")?;
        let assignments = self.assignments()?;
        self.output_clause()?;
        let from = if self.eat_kw("FROM") { self.from_list()? } else { Vec::new() };
        let where_ = if self.eat_kw("WHERE") { Some(self.where_or_cursor()?) } else { None };
        if self.eat_kw("OPTION") {
            self.skip_parens()?;
        }
        Ok(Statement::Update { ctes, target, assignments, from, where_ })
    }

    fn where_or_cursor(&mut self) -> PResult<ExprRefs> {
        if self.is_kw("CURRENT") && self.is_kw_at(1, "OF") {
            self.i += 2;
            self.eat_kw("GLOBAL");
            self.bump();
            return Ok(ExprRefs::default());
        }
        self.expr()
    }

    fn delete(&mut self, ctes: Vec<Cte>) -> PResult<Statement> {
        self.expect_kw("DELETE")?;
        if self.eat_kw("TOP") {
            self.paren_expr()?;
            self.eat_kw("PERCENT");
        }
        self.eat_kw("FROM");
        // "DELETE FROM TABLE T" appears in hand-written scripts; tolerate it
        if self.is_kw("TABLE") && matches!(self.peek_at(1), Some(Token { tok: Tok::Ident { .. } | Tok::Var(_), .. })) {
            self.i += 1;
        }
        let target = self.insert_target()?;
        self.table_hints()?;
        self.output_clause()?;
        let from = if self.eat_kw("FROM") { self.from_list()? } else { Vec::new() };
        let where_ = if self.eat_kw("WHERE") { Some(self.where_or_cursor()?) } else { None };
        if self.eat_kw("OPTION") {
            self.skip_parens()?;
        }
        Ok(Statement::Delete { ctes, target, from, where_ })
    }

    fn merge(&mut self) -> PResult<Statement> {
        self.expect_kw("MERGE")?;
        if self.eat_kw("TOP") {
            self.paren_expr()?;
            self.eat_kw("PERCENT");
        }
        self.eat_kw("INTO");
        let target = self.object_name()?;
        self.table_hints()?;
        let target_alias = self.opt_alias()?;
        self.expect_kw("USING")?;
        let mut sources = self.table_factor(None)?;
        if sources.len() != 1 {
            return self.err("MERGE source must be a single table source");
        }
        let source = sources.pop().unwrap();
        self.expect_kw("ON")?;
        let on = self.expr()?;
        let mut clauses = Vec::new();
        while self.eat_kw("WHEN") {
            self.eat_kw("NOT");
            self.expect_kw("MATCHED")?;
            if self.eat_kw("BY") {
                let _ = self.eat_kw("TARGET") || self.eat_kw("SOURCE");
            }
            let condition = if self.eat_kw("AND") { Some(self.expr()?) } else { None };
            self.expect_kw("THEN")?;
            let action = if self.eat_kw("UPDATE") {
                self.expect_kw("SET")?;
                MergeAction::Update(self.assignments()?)
            } else if self.eat_kw("DELETE") {
                MergeAction::Delete
            } else if self.eat_kw("INSERT") {
                let columns = if self.is(&Tok::LParen) { self.ident_list()? } else { Vec::new() };
                if self.is_kw("DEFAULT") {
                    self.i += 1;
                    self.expect_kw("VALUES")?;
                    MergeAction::Insert { columns, values: Vec::new() }
                } else {
                    self.expect_kw("VALUES")?;
                    let mut rows = self.values_rows()?;
                    MergeAction::Insert { columns, values: rows.swap_remove(0) }
                }
            } else {
                return self.err("expected UPDATE, DELETE or INSERT");
            };
            clauses.push(MergeClause { condition, action });
        }
        self.output_clause()?;
        if self.eat_kw("OPTION") {
            self.skip_parens()?;
        }
        Ok(Statement::Merge { target, target_alias, source, on, clauses })
    }

    fn bulk_insert(&mut self) -> PResult<Statement> {
        self.expect_kw("BULK")?;
        self.expect_kw("INSERT")?;
        let target = self.object_name()?;
        self.expect_kw("FROM")?;
        let file = match self.bump() {
            Some(Token { tok: Tok::Str(s), .. }) => s,
            _ => return self.err("expected file path string"),
        };
        if self.eat_kw("WITH") {
            self.skip_parens()?;
        }
        Ok(Statement::BulkInsert { target, file })
    }

    // ---- DDL ------------------------------------------------------------

    fn create(&mut self) -> PResult<Statement> {
        let start = self.pos();
        self.expect_kw("CREATE")?;
        let or_alter = if self.is_kw("OR") && self.is_kw_at(1, "ALTER") {
            self.i += 2;
            true
        } else {
            false
        };
        if self.eat_kw("TABLE") {
            let name = self.object_name()?;
            let columns = self.column_defs()?;
            self.skip_to_boundary()?;
            return Ok(Statement::CreateTable { name, columns });
        }
        if self.eat_kw("VIEW") {
            return self.view_body(start, or_alter);
        }
        if self.eat_kw("PROCEDURE") || self.eat_kw("PROC") {
            let name = self.object_name()?;
            // a procedure body runs to the end of the batch
            self.i = self.toks.len();
            let text = self.src[start..].trim_end().to_string();
            return Ok(Statement::CreateProcedure { name, text, or_alter });
        }
        if self.eat_kw("FUNCTION") || self.eat_kw("TRIGGER") {
            self.i = self.toks.len();
            return Ok(Statement::NoData { keyword: "CREATE".into(), refs: ExprRefs::default() });
        }
        // indexes, statistics, schemas, types, ...
        self.skip_to_boundary()?;
        Ok(Statement::NoData { keyword: "CREATE".into(), refs: ExprRefs::default() })
    }

    fn view_body(&mut self, start: usize, or_alter: bool) -> PResult<Statement> {
        let name = self.object_name()?;
        let columns = if self.is(&Tok::LParen) { self.ident_list()? } else { Vec::new() };
        if self.eat_kw("WITH") {
            self.any_ident()?;
            while self.eat(&Tok::Comma) {
                self.any_ident()?;
            }
        }
        self.expect_kw("AS")?;
        let query = self.query()?;
        if self.is_kw("WITH") && self.is_kw_at(1, "CHECK") {
            self.i += 3;
        }
        let text = self.src[start..self.prev_end()].to_string();
        Ok(Statement::CreateView { name, columns, query, text, or_alter })
    }

    fn column_defs(&mut self) -> PResult<Vec<ColumnDef>> {
        self.expect(&Tok::LParen)?;
        let mut cols = Vec::new();
        loop {
            const TABLE_CONSTRAINTS: &[&str] = &["CONSTRAINT", "PRIMARY", "UNIQUE", "FOREIGN", "CHECK", "INDEX", "PERIOD"];
            if TABLE_CONSTRAINTS.iter().any(|k| self.is_kw(k)) {
                self.skip_item()?;
            } else {
                let name = self.any_ident()?;
                let data_type = if self.eat_kw("AS") {
                    self.expr()?;
                    "computed".to_string()
                } else {
                    self.data_type()?
                };
                cols.push(ColumnDef { name, data_type });
                self.skip_item()?;
            }
            if self.eat(&Tok::Comma) {
                continue;
            }
            self.expect(&Tok::RParen)?;
            if cols.is_empty() {
                return self.err("table without columns");
            }
            return Ok(cols);
        }
    }

    /// Skips to the next `,` or `)` at the current depth.
    fn skip_item(&mut self) -> PResult<()> {
        loop {
            match self.peek().map(|t| &t.tok) {
                None => return self.err("unexpected end in column list"),
                Some(Tok::Comma) | Some(Tok::RParen) => return Ok(()),
                Some(Tok::LParen) => self.skip_parens()?,
                _ => self.i += 1,
            }
        }
    }

    fn alter(&mut self) -> PResult<Statement> {
        let start = self.pos();
        self.expect_kw("ALTER")?;
        if self.eat_kw("TABLE") {
            let name = self.object_name()?;
            if self.eat_kw("ADD") {
                let mut columns = Vec::new();
                loop {
                    if ["CONSTRAINT", "PRIMARY", "UNIQUE", "FOREIGN", "CHECK", "INDEX"].iter().any(|k| self.is_kw(k)) {
                        self.skip_to_item_end()?;
                    } else {
                        self.eat_kw("COLUMN");
                        let col = self.any_ident()?;
                        let data_type = self.data_type()?;
                        columns.push(ColumnDef { name: col, data_type });
                        self.skip_to_item_end()?;
                    }
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                return Ok(Statement::AlterTableAdd { name, columns });
            }
            if self.is_kw("DROP") && self.is_kw_at(1, "COLUMN") {
                self.i += 2;
                if self.is_kw("IF") && self.is_kw_at(1, "EXISTS") {
                    self.i += 2;
                }
                let mut columns = vec![self.any_ident()?];
                while self.eat(&Tok::Comma) {
                    columns.push(self.any_ident()?);
                }
                return Ok(Statement::AlterTableDropColumn { name, columns });
            }
            self.skip_to_boundary()?;
            return Ok(Statement::NoData { keyword: "ALTER".into(), refs: ExprRefs::default() });
        }
        if self.eat_kw("VIEW") {
            return self.view_body(start, true);
        }
        if self.eat_kw("PROCEDURE") || self.eat_kw("PROC") {
            let name = self.object_name()?;
            self.i = self.toks.len();
            let text = self.src[start..].trim_end().to_string();
            return Ok(Statement::CreateProcedure { name, text, or_alter: true });
        }
        self.skip_to_boundary()?;
        Ok(Statement::NoData { keyword: "ALTER".into(), refs: ExprRefs::default() })
    }

    fn skip_to_item_end(&mut self) -> PResult<()> {
        loop {
            if self.at_end() || self.is(&Tok::Comma) || self.is(&Tok::Semi) || self.at_statement_start() {
                return Ok(());
            }
            if self.is(&Tok::LParen) {
                self.skip_parens()?;
            } else {
                self.i += 1;
            }
        }
    }

    fn drop_stmt(&mut self) -> PResult<Statement> {
        self.expect_kw("DROP")?;
        let kind = if self.eat_kw("TABLE") {
            ObjectKind::Table
        } else if self.eat_kw("VIEW") {
            ObjectKind::View
        } else if self.eat_kw("PROCEDURE") || self.eat_kw("PROC") {
            ObjectKind::Procedure
        } else {
            self.skip_to_boundary()?;
            return Ok(Statement::NoData { keyword: "DROP".into(), refs: ExprRefs::default() });
        };
        let if_exists = if self.is_kw("IF") && self.is_kw_at(1, "EXISTS") {
            self.i += 2;
            true
        } else {
            false
        };
        let mut names = vec![self.object_name()?];
        while self.eat(&Tok::Comma) {
            names.push(self.object_name()?);
        }
        Ok(Statement::Drop { kind, names, if_exists })
    }

    // ---- procedural -------------------------------------------------------

    fn exec(&mut self) -> PResult<Statement> {
        self.bump(); // EXEC / EXECUTE
        if self.is(&Tok::LParen) {
            self.skip_parens()?;
            self.skip_to_boundary()?;
            return Ok(Statement::Exec { proc: None });
        }
        // @ret = proc
        if matches!(self.peek(), Some(Token { tok: Tok::Var(_), .. }))
            && matches!(self.peek_at(1), Some(Token { tok: Tok::Op(o), .. }) if o == "=")
        {
            self.i += 2;
        }
        if let Some(Token { tok: Tok::Var(_), .. }) = self.peek() {
            // EXEC @procname
            self.i += 1;
            self.skip_to_boundary()?;
            return Ok(Statement::Exec { proc: None });
        }
        let name = self.object_name()?;
        self.skip_to_boundary()?;
        let dynamic = name.name().eq_ignore_ascii_case("sp_executesql");
        Ok(Statement::Exec { proc: (!dynamic).then_some(name) })
    }

    fn if_stmt(&mut self) -> PResult<Statement> {
        self.expect_kw("IF")?;
        self.expr()?;
        let then = vec![self.statement()?];
        self.eat(&Tok::Semi);
        let otherwise = if self.eat_kw("ELSE") { vec![self.statement()?] } else { Vec::new() };
        Ok(Statement::If { then, otherwise })
    }

    fn begin(&mut self) -> PResult<Statement> {
        self.expect_kw("BEGIN")?;
        if self.eat_kw("TRAN") || self.eat_kw("TRANSACTION") || self.eat_kw("DISTRIBUTED") {
            self.skip_to_boundary()?;
            return Ok(Statement::NoData { keyword: "BEGIN".into(), refs: ExprRefs::default() });
        }
        let tagged = if self.eat_kw("TRY") {
            Some("TRY")
        } else if self.eat_kw("CATCH") {
            Some("CATCH")
        } else {
            None
        };
        let mut body = Vec::new();
        loop {
            while self.eat(&Tok::Semi) {}
            if self.at_end() {
                return self.err("missing END");
            }
            if self.eat_kw("END") {
                if let Some(tag) = tagged {
                    self.expect_kw(tag)?;
                }
                break;
            }
            body.push(self.statement()?);
        }
        Ok(Statement::Block(body))
    }

    fn set(&mut self) -> PResult<Statement> {
        self.expect_kw("SET")?;
        if let Some(Token { tok: Tok::Var(_), .. }) = self.peek() {
            self.i += 1;
            if matches!(self.peek(), Some(Token { tok: Tok::Op(o), .. }) if o.ends_with('=')) {
                self.i += 1;
                if self.is_kw("CURSOR") {
                    self.skip_to_boundary()?;
                    return Ok(Statement::NoData { keyword: "SET".into(), refs: ExprRefs::default() });
                }
                let refs = self.expr()?;
                return Ok(Statement::NoData { keyword: "SET".into(), refs });
            }
        }
        self.skip_to_boundary()?;
        Ok(Statement::NoData { keyword: "SET".into(), refs: ExprRefs::default() })
    }

    fn declare(&mut self) -> PResult<Statement> {
        self.expect_kw("DECLARE")?;
        let mut refs = ExprRefs::default();
        loop {
            match self.bump() {
                Some(Token { tok: Tok::Var(_), .. }) => {}
                Some(Token { tok: Tok::Ident { .. }, .. }) if self.is_kw("CURSOR") => {
                    self.i += 1;
                    self.skip_to_boundary()?;
                    // DECLARE c CURSOR FOR SELECT ...: the SELECT is not run here
                    if self.is_kw("SELECT") {
                        self.query()?;
                    }
                    return Ok(Statement::NoData { keyword: "DECLARE".into(), refs });
                }
                _ => return self.err("expected variable"),
            }
            self.eat_kw("AS");
            if self.eat_kw("TABLE") {
                self.skip_parens()?;
            } else if !self.eat_kw("CURSOR") {
                self.data_type()?;
            }
            if self.eat(&Tok::Op("=".into())) {
                refs.absorb(self.expr()?);
            }
            if !self.eat(&Tok::Comma) {
                return Ok(Statement::NoData { keyword: "DECLARE".into(), refs });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(src: &str) -> Statement {
        parse_statement(src).unwrap_or_else(|e| panic!("{src}: {e}"))
    }

    #[test]
    fn fig1_insert_with_join() {
        let s = one(
            "INSERT SalesHistory SELECT c.CustomerId, c.Region, r.Rate * c.Amount AS Amount \
             FROM StagedSales c JOIN ConversionRate r ON c.Region = r.Region",
        );
        let Statement::Insert { target, source: InsertSource::Query(q), .. } = s else { panic!() };
        assert_eq!(target.name(), "SalesHistory");
        assert_eq!(q.body.items.len(), 3);
        let SelectItem::Expr { refs, alias, .. } = &q.body.items[2] else { panic!() };
        assert_eq!(alias.as_deref(), Some("Amount"));
        assert_eq!(refs.columns.len(), 2);
        assert_eq!(q.body.from.len(), 2);
        assert!(q.body.from[1].on.is_some());
    }

    #[test]
    fn if_exists_delete_from_table() {
        let s = one(
            "IF EXISTS(SELECT * FROM INFORMATION_SCHEMA.TABLES WHERE TABLE_NAME='StagedSales') DELETE FROM TABLE StagedSales",
        );
        let Statement::If { then, .. } = s else { panic!() };
        assert!(matches!(&then[0], Statement::Delete { target, from, .. } if target.name() == "StagedSales" && from.is_empty()));
    }

    #[test]
    fn bulk_and_exec() {
        assert!(matches!(one("BULK INSERT StagedSales FROM 'newSales.csv'"), Statement::BulkInsert { file, .. } if file == "newSales.csv"));
        assert!(matches!(one("EXECUTE CleanAndAppendSalesHistory @trackingSystemVersion"),
            Statement::Exec { proc: Some(p) } if p.name() == "CleanAndAppendSalesHistory"));
        assert!(matches!(one("EXEC sp_executesql N'select 1'"), Statement::Exec { proc: None }));
        assert!(matches!(one("EXEC ('select 1')"), Statement::Exec { proc: None }));
    }

    #[test]
    fn script_without_semicolons() {
        let all = parse_script("SET @a = 2 SELECT a FROM T UPDATE T SET a = 1 WHERE b = 2").unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|p| p.result.is_ok()));
        assert_eq!(all[1].span, (11, 26));
    }

    #[test]
    fn recovery_after_error() {
        let all = parse_script("SELECT a FROM T PIVOT (x); INSERT U VALUES (1)").unwrap();
        assert_eq!(all.len(), 2);
        assert!(all[0].result.is_err());
        assert!(all[1].result.is_ok());
    }

    #[test]
    fn ddl_forms() {
        let Statement::CreateTable { columns, .. } =
            one("CREATE TABLE dbo.T (a int NOT NULL PRIMARY KEY, b decimal(10, 2) DEFAULT (0), CONSTRAINT pk PRIMARY KEY (a))")
        else {
            panic!()
        };
        assert_eq!(columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(columns[1].data_type, "decimal(10, 2)");
        assert!(matches!(one("DROP TABLE IF EXISTS T, U"), Statement::Drop { names, if_exists: true, .. } if names.len() == 2));
        assert!(matches!(one("CREATE VIEW V AS SELECT a FROM T"), Statement::CreateView { text, .. } if text == "CREATE VIEW V AS SELECT a FROM T"));
        assert!(matches!(one("CREATE PROCEDURE P @x int AS BEGIN SELECT 1 END"), Statement::CreateProcedure { .. }));
        assert!(matches!(one("ALTER TABLE T ADD c int, d varchar(10)"), Statement::AlterTableAdd { columns, .. } if columns.len() == 2));
    }

    #[test]
    fn select_variants() {
        for src in [
            "SELECT TOP (5) a, b = c + 1, 'x' AS lit, COUNT(*) n FROM T WITH (NOLOCK) WHERE a IN (1, 2) AND b NOT LIKE 'x%' GROUP BY a HAVING COUNT(*) > 1 ORDER BY a DESC",
            "WITH c AS (SELECT a FROM T) SELECT * FROM c UNION ALL SELECT a FROM U",
            "SELECT @v = a FROM T WHERE b BETWEEN 1 AND 2",
            "SELECT CASE WHEN a > 1 THEN b ELSE c END, CAST(d AS int), CONVERT(varchar(5), e), DATEADD(day, 1, f) FROM T",
            "SELECT x.* FROM (SELECT a FROM T) x CROSS APPLY dbo.f(x.a) y LEFT OUTER JOIN U u ON u.a = x.a",
            "SELECT a INTO #tmp FROM T WHERE EXISTS (SELECT 1 FROM U WHERE U.a = T.a)",
            "SELECT ROW_NUMBER() OVER (PARTITION BY a ORDER BY b) rn FROM T",
            "SELECT STATMAN([a], [b]) FROM T",
        ] {
            one(src);
        }
    }

    #[test]
    fn dml_variants() {
        for src in [
            "UPDATE c SET c.Balance = c.Balance + @amt, Name = s.Name FROM Customer c JOIN Staging s ON s.Id = c.Id WHERE c.Id = @id",
            "DELETE TOP (10) FROM T OUTPUT deleted.a INTO @log WHERE a < 5",
            "MERGE INTO T AS t USING S AS s ON t.id = s.id WHEN MATCHED THEN UPDATE SET t.v = s.v WHEN NOT MATCHED BY TARGET THEN INSERT (id, v) VALUES (s.id, s.v) WHEN NOT MATCHED BY SOURCE THEN DELETE;",
            "INSERT INTO T (a, b) VALUES (1, 2), (@x, (SELECT MAX(c) FROM U))",
            "INSERT T EXEC dbo.P 1",
            "DECLARE @a int = 1, @t TABLE (x int)",
            "WHILE @i < 10 BEGIN SET @i = @i + 1 END",
            "BEGIN TRAN; COMMIT TRAN",
            "BEGIN TRY SELECT 1 END TRY BEGIN CATCH ROLLBACK END CATCH",
            "TRUNCATE TABLE T",
        ] {
            let all = parse_script(src).unwrap();
            for p in all {
                p.result.unwrap_or_else(|e| panic!("{src}: {e}"));
            }
        }
    }
}

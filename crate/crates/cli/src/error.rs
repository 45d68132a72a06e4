use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
    Divergence,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Divergence => "divergence",
        }
    }

    pub fn code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Numeric => 4,
            Category::Divergence => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Data,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.category.code()
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    /// One line: `error[category]: message`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {flat}", self.category.name())
    }
}

impl From<vdae::Error> for CliError {
    fn from(e: vdae::Error) -> Self {
        let category = match e.category() {
            "usage" => Category::Usage,
            "numeric" => Category::Numeric,
            "divergence" => Category::Divergence,
            _ => Category::Data,
        };
        CliError {
            category,
            message: e.to_string(),
        }
    }
}

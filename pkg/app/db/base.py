from contextlib import contextmanager
from pathlib import Path
from typing import Generator, Union

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from app.db.models import Base


class Database:
    """SQLite run manifest kept next to the artifacts it describes.

    Each output directory owns one database file holding the runs (one per
    config hash), the latest status of every stage and the artifacts a stage
    wrote. Tables are created on open, so an empty directory is a valid store.
    Sessions keep loaded rows readable after commit; stage records are handed
    back to callers once the session has closed.
    """

    def __init__(self, db_url: str) -> None:
        """Open the database and create missing tables.

        Args:
            db_url: SQLAlchemy connection URL
        """
        self.engine = create_engine(db_url, future=True)
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(
            bind=self.engine,
            autoflush=False,
            autocommit=False,
            expire_on_commit=False,
            future=True,
        )

    @classmethod
    def in_directory(cls, directory: Union[str, Path], name: str = "manifest.db") -> "Database":
        """Open (creating if needed) ``<directory>/<name>``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        return cls(f"sqlite:///{(directory / name).resolve()}")

    @contextmanager
    def session(self) -> Generator[Session, None, None]:
        """Context manager committing on success and rolling back on error.

        Yields:
            Database session instance
        """
        db = self.SessionLocal()
        try:
            yield db
            db.commit()
        except Exception:
            db.rollback()
            raise
        finally:
            db.close()

    def dispose(self) -> None:
        """Release pooled connections so the file can be removed or reopened."""
        self.engine.dispose()

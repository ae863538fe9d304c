from contextlib import contextmanager
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from config import settings
from db_models import Base

engine = create_engine(settings.registry_url, connect_args={"check_same_thread": False})
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def configure_registry(url: str) -> None:
    """Point the run registry at another database (tests use a temporary SQLite file)."""
    global engine
    engine = create_engine(url, connect_args={"check_same_thread": False})
    SessionLocal.configure(bind=engine)


def init_db() -> None:
    """Create the SQLite directory and the registry tables if they are missing."""
    url = engine.url
    if url.drivername.startswith("sqlite") and url.database not in (None, "", ":memory:"):
        Path(url.database).parent.mkdir(parents=True, exist_ok=True)
    Base.metadata.create_all(bind=engine)


# Database Dependency
@contextmanager
def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()

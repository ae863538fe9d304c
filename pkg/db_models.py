# Standard library imports
import uuid
from enum import Enum

# SQLAlchemy imports
from sqlalchemy import Column, DateTime, Float, String, Text, func
from sqlalchemy.ext.declarative import declarative_base

Base = declarative_base()


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETE = "complete"
    FAILED = "failed"


class RunDB(Base):
    """One command invocation against one experiment directory"""

    __tablename__ = "runs"
    id = Column(String, primary_key=True, index=True, default=lambda: str(uuid.uuid4()))
    command = Column(String, nullable=False)
    config_hash = Column(String, index=True, nullable=False)
    experiment_dir = Column(String)
    status = Column(String, default=RunStatus.PENDING.value)
    r1 = Column(Float, nullable=True)  # grid cells only
    lam = Column(Float, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), server_default=func.now(), onupdate=func.now())
    finished_at = Column(DateTime(timezone=True), nullable=True)

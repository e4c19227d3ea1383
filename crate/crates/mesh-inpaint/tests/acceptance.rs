// Acceptance suite: one test per criterion (filled in as modules land).

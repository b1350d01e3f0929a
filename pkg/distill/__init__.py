# Teacher-student missing label completion
